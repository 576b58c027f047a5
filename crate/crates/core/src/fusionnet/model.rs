use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{concat, silu, silu_grad, split, upsample2x, upsample2x_adjoint};
use super::{ConvLayer, FeatureMap, FusionError, LevelTargets, Result, Sample};
use crate::rng;
use crate::Scalar;

pub const INPUT_SIZE: usize = 64;
pub const INPUT_CHANNELS: usize = 3;
/// Objectness plus four box terms per cell.
pub const HEAD_CHANNELS: usize = 5;
pub const LEVEL_STRIDES: [usize; 3] = [8, 16, 32];
/// Width of the deep half in the two top-down concatenations.
const DEEP4: usize = 16;
const DEEP3: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Topdown,
    Bottomup,
    Head,
    Fusion,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [Self::Backbone, Self::Topdown, Self::Bottomup, Self::Head, Self::Fusion];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Backbone => "backbone",
            Self::Topdown => "topdown",
            Self::Bottomup => "bottomup",
            Self::Head => "head",
            Self::Fusion => "fusion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// α held constant during training.
    Fixed,
    /// α learned with the other parameters.
    #[default]
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionCoefficients<T> {
    /// Weight on the upsampled P5' entering P4'.
    pub alpha45: T,
    /// Weight on the upsampled P4' entering P3'.
    pub alpha34: T,
    pub mode: FusionMode,
}

impl<T: Scalar> FusionCoefficients<T> {
    pub fn fixed(alpha: T) -> Self {
        Self { alpha45: alpha, alpha34: alpha, mode: FusionMode::Fixed }
    }

    pub fn adaptive(init: T) -> Self {
        Self { alpha45: init, alpha34: init, mode: FusionMode::Adaptive }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone<T> {
    /// Three stride-2 convs down to C3 at stride 8.
    pub stem: [ConvLayer<T>; 3],
    pub stage4: ConvLayer<T>,
    pub stage5: ConvLayer<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopDown<T> {
    pub lat5: ConvLayer<T>,
    pub lat4: ConvLayer<T>,
    pub lat3: ConvLayer<T>,
    pub mix4: ConvLayer<T>,
    pub mix3: ConvLayer<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottomUp<T> {
    pub mix3: ConvLayer<T>,
    pub down3: ConvLayer<T>,
    pub mix4: ConvLayer<T>,
    pub down4: ConvLayer<T>,
    pub mix5: ConvLayer<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heads<T> {
    pub p3: ConvLayer<T>,
    pub p4: ConvLayer<T>,
    pub p5: ConvLayer<T>,
}

/// Desk-scale detector: backbone, adaptive top-down path, bottom-up
/// aggregation and a linear head per level. Also used as the gradient
/// container, holding one derivative per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel<T> {
    pub backbone: Backbone<T>,
    pub topdown: TopDown<T>,
    pub bottomup: BottomUp<T>,
    pub heads: Heads<T>,
    pub fusion: FusionCoefficients<T>,
}

/// Input and pre-activation of a conv followed by SiLU.
#[derive(Debug, Clone)]
struct Act<T> {
    input: FeatureMap<T>,
    pre: FeatureMap<T>,
}

fn conv_act<T: Scalar>(layer: &ConvLayer<T>, x: &FeatureMap<T>) -> Result<(Act<T>, FeatureMap<T>)> {
    let pre = layer.forward(x)?;
    let out = pre.map(silu);
    Ok((Act { input: x.clone(), pre }, out))
}

fn conv_act_back<T: Scalar>(
    layer: &ConvLayer<T>,
    act: &Act<T>,
    grad_out: &FeatureMap<T>,
    grads: &mut ConvLayer<T>,
) -> Result<FeatureMap<T>> {
    let gz = grad_out.zip_map(&act.pre, |g, z| g * silu_grad(z));
    let (gx, gp) = layer.backward(&act.input, &gz)?;
    accumulate(grads, &gp.weight, &gp.bias);
    Ok(gx)
}

fn accumulate<T: Scalar>(dst: &mut ConvLayer<T>, w: &[T], b: &[T]) {
    dst.weight.iter_mut().zip(w).for_each(|(d, &g)| *d += g);
    dst.bias.iter_mut().zip(b).for_each(|(d, &g)| *d += g);
}

#[derive(Debug, Clone)]
pub struct BackboneTrace<T> {
    stem: Vec<Act<T>>,
    s4: Act<T>,
    s5: Act<T>,
    pub c3: FeatureMap<T>,
    pub c4: FeatureMap<T>,
    pub c5: FeatureMap<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn forward(&self, x: &FeatureMap<T>) -> Result<BackboneTrace<T>> {
        let mut stem = Vec::with_capacity(3);
        let mut h = x.clone();
        for layer in &self.stem {
            let (a, out) = conv_act(layer, &h)?;
            stem.push(a);
            h = out;
        }
        let (s4, c4) = conv_act(&self.stage4, &h)?;
        let (s5, c5) = conv_act(&self.stage5, &c4)?;
        Ok(BackboneTrace { stem, s4, s5, c3: h, c4, c5 })
    }

    fn backward(
        &self,
        t: &BackboneTrace<T>,
        g3: &FeatureMap<T>,
        g4: &FeatureMap<T>,
        g5: &FeatureMap<T>,
        grads: &mut Backbone<T>,
    ) -> Result<()> {
        let mut g_c4 = conv_act_back(&self.stage5, &t.s5, g5, &mut grads.stage5)?;
        g_c4.add_assign(g4);
        let mut g = conv_act_back(&self.stage4, &t.s4, &g_c4, &mut grads.stage4)?;
        g.add_assign(g3);
        for i in (0..3).rev() {
            g = conv_act_back(&self.stem[i], &t.stem[i], &g, &mut grads.stem[i])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TopDownTrace<T> {
    lat5: Act<T>,
    lat4: Act<T>,
    lat3: Act<T>,
    mix4: Act<T>,
    mix3: Act<T>,
    /// Upsampled P5' and P4' before the α weighting.
    pub up5: FeatureMap<T>,
    pub up4: FeatureMap<T>,
    /// Concatenations fed to the mixing convs; the deep half comes first.
    pub cat4: FeatureMap<T>,
    pub cat3: FeatureMap<T>,
    pub p5: FeatureMap<T>,
    pub p4: FeatureMap<T>,
    pub p3: FeatureMap<T>,
}

impl<T: Scalar> TopDownTrace<T> {
    /// Deep (upsampled) halves of the two concatenations.
    pub fn deep_halves(&self) -> (FeatureMap<T>, FeatureMap<T>) {
        (split(&self.cat4, DEEP4).0, split(&self.cat3, DEEP3).0)
    }
}

impl<T: Scalar> TopDown<T> {
    /// Top-down path: `P5' = f(C5)`, `P_i' = mix(α·up(P_{i+1}') ⊕ f(C_i))`.
    pub fn forward(
        &self,
        c3: &FeatureMap<T>,
        c4: &FeatureMap<T>,
        c5: &FeatureMap<T>,
        fusion: &FusionCoefficients<T>,
    ) -> Result<TopDownTrace<T>> {
        let (lat5, p5) = conv_act(&self.lat5, c5)?;
        let up5 = upsample2x(&p5);
        let (lat4, f4) = conv_act(&self.lat4, c4)?;
        let cat4 = concat(&up5.scale(fusion.alpha45), &f4)?;
        let (mix4, p4) = conv_act(&self.mix4, &cat4)?;
        let up4 = upsample2x(&p4);
        let (lat3, f3) = conv_act(&self.lat3, c3)?;
        let cat3 = concat(&up4.scale(fusion.alpha34), &f3)?;
        let (mix3, p3) = conv_act(&self.mix3, &cat3)?;
        Ok(TopDownTrace { lat5, lat4, lat3, mix4, mix3, up5, up4, cat4, cat3, p5, p4, p3 })
    }

    /// Returns gradients for `(C3, C4, C5)` and accumulates parameter and
    /// α gradients.
    #[allow(clippy::type_complexity)]
    fn backward(
        &self,
        t: &TopDownTrace<T>,
        fusion: &FusionCoefficients<T>,
        g_p3: &FeatureMap<T>,
        g_p4: &FeatureMap<T>,
        g_p5: &FeatureMap<T>,
        grads: &mut TopDown<T>,
        g_fusion: &mut FusionCoefficients<T>,
    ) -> Result<(FeatureMap<T>, FeatureMap<T>, FeatureMap<T>)> {
        let g_cat3 = conv_act_back(&self.mix3, &t.mix3, g_p3, &mut grads.mix3)?;
        let (g_deep3, g_f3) = split(&g_cat3, DEEP3);
        g_fusion.alpha34 += g_deep3.dot(&t.up4);
        let mut g_p4 = g_p4.clone();
        g_p4.add_assign(&upsample2x_adjoint(&g_deep3.scale(fusion.alpha34))?);
        let g_c3 = conv_act_back(&self.lat3, &t.lat3, &g_f3, &mut grads.lat3)?;

        let g_cat4 = conv_act_back(&self.mix4, &t.mix4, &g_p4, &mut grads.mix4)?;
        let (g_deep4, g_f4) = split(&g_cat4, DEEP4);
        g_fusion.alpha45 += g_deep4.dot(&t.up5);
        let mut g_p5 = g_p5.clone();
        g_p5.add_assign(&upsample2x_adjoint(&g_deep4.scale(fusion.alpha45))?);
        let g_c4 = conv_act_back(&self.lat4, &t.lat4, &g_f4, &mut grads.lat4)?;
        let g_c5 = conv_act_back(&self.lat5, &t.lat5, &g_p5, &mut grads.lat5)?;
        Ok((g_c3, g_c4, g_c5))
    }
}

#[derive(Debug, Clone)]
pub struct BottomUpTrace<T> {
    mix3: Act<T>,
    down3: Act<T>,
    mix4: Act<T>,
    down4: Act<T>,
    mix5: Act<T>,
    pub p3: FeatureMap<T>,
    pub p4: FeatureMap<T>,
    pub p5: FeatureMap<T>,
}

impl<T: Scalar> BottomUp<T> {
    /// `P3 = mix(P3')`, `P_{i+1} = mix(down(P_i) ⊕ P_{i+1}')`.
    pub fn forward(&self, p3t: &FeatureMap<T>, p4t: &FeatureMap<T>, p5t: &FeatureMap<T>) -> Result<BottomUpTrace<T>> {
        let (mix3, p3) = conv_act(&self.mix3, p3t)?;
        let (down3, d3) = conv_act(&self.down3, &p3)?;
        let (mix4, p4) = conv_act(&self.mix4, &concat(&d3, p4t)?)?;
        let (down4, d4) = conv_act(&self.down4, &p4)?;
        let (mix5, p5) = conv_act(&self.mix5, &concat(&d4, p5t)?)?;
        Ok(BottomUpTrace { mix3, down3, mix4, down4, mix5, p3, p4, p5 })
    }

    fn backward(
        &self,
        t: &BottomUpTrace<T>,
        g_p3: &FeatureMap<T>,
        g_p4: &FeatureMap<T>,
        g_p5: &FeatureMap<T>,
        grads: &mut BottomUp<T>,
    ) -> Result<(FeatureMap<T>, FeatureMap<T>, FeatureMap<T>)> {
        let g_cat5 = conv_act_back(&self.mix5, &t.mix5, g_p5, &mut grads.mix5)?;
        let (g_d4, g_p5t) = split(&g_cat5, self.down4.out_ch);
        let mut g_p4 = g_p4.clone();
        g_p4.add_assign(&conv_act_back(&self.down4, &t.down4, &g_d4, &mut grads.down4)?);
        let g_cat4 = conv_act_back(&self.mix4, &t.mix4, &g_p4, &mut grads.mix4)?;
        let (g_d3, g_p4t) = split(&g_cat4, self.down3.out_ch);
        let mut g_p3 = g_p3.clone();
        g_p3.add_assign(&conv_act_back(&self.down3, &t.down3, &g_d3, &mut grads.down3)?);
        let g_p3t = conv_act_back(&self.mix3, &t.mix3, &g_p3, &mut grads.mix3)?;
        Ok((g_p3t, g_p4t, g_p5t))
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub backbone: BackboneTrace<T>,
    pub topdown: TopDownTrace<T>,
    pub bottomup: BottomUpTrace<T>,
    /// Head outputs for P3, P4, P5.
    pub outputs: [FeatureMap<T>; 3],
}

type LayerRef<'a, T> = (&'static str, ParamGroup, &'a ConvLayer<T>);
type LayerMut<'a, T> = (&'static str, ParamGroup, &'a mut ConvLayer<T>);

impl<T: Scalar> ToyModel<T> {
    /// Fixed architecture with the given initial weights source.
    pub fn from_rng(rng: &mut impl Rng, fusion: FusionCoefficients<T>) -> Self {
        let mut c = |i, o, k, s| ConvLayer::random(i, o, k, s, rng).expect("architecture shapes are valid");
        Self {
            backbone: Backbone { stem: [c(3, 4, 3, 2), c(4, 8, 3, 2), c(8, 8, 3, 2)], stage4: c(8, 16, 3, 2), stage5: c(16, 32, 3, 2) },
            topdown: TopDown {
                lat5: c(32, 16, 1, 1),
                lat4: c(16, 16, 1, 1),
                lat3: c(8, 8, 1, 1),
                mix4: c(DEEP4 + 16, 16, 3, 1),
                mix3: c(DEEP3 + 8, 8, 3, 1),
            },
            bottomup: BottomUp {
                mix3: c(8, 8, 3, 1),
                down3: c(8, 8, 3, 2),
                mix4: c(8 + 16, 16, 3, 1),
                down4: c(16, 16, 3, 2),
                mix5: c(16 + 16, 16, 3, 1),
            },
            heads: Heads { p3: c(8, HEAD_CHANNELS, 1, 1), p4: c(16, HEAD_CHANNELS, 1, 1), p5: c(16, HEAD_CHANNELS, 1, 1) },
            fusion,
        }
    }

    /// Deterministic initialisation from the model-init stream of `seed`.
    pub fn new(seed: u64, fusion: FusionCoefficients<T>) -> Self {
        Self::from_rng(&mut rng::stream(seed, rng::MODEL_INIT), fusion)
    }

    /// Same architecture with every parameter zeroed.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_params_mut(&mut |_, _, v| v.iter_mut().for_each(|x| *x = T::zero()));
        z
    }

    pub fn layers(&self) -> Vec<LayerRef<'_, T>> {
        use ParamGroup::*;
        let (b, t, u, h) = (&self.backbone, &self.topdown, &self.bottomup, &self.heads);
        vec![
            ("backbone.stem0", Backbone, &b.stem[0]),
            ("backbone.stem1", Backbone, &b.stem[1]),
            ("backbone.stem2", Backbone, &b.stem[2]),
            ("backbone.stage4", Backbone, &b.stage4),
            ("backbone.stage5", Backbone, &b.stage5),
            ("topdown.lat5", Topdown, &t.lat5),
            ("topdown.lat4", Topdown, &t.lat4),
            ("topdown.lat3", Topdown, &t.lat3),
            ("topdown.mix4", Topdown, &t.mix4),
            ("topdown.mix3", Topdown, &t.mix3),
            ("bottomup.mix3", Bottomup, &u.mix3),
            ("bottomup.down3", Bottomup, &u.down3),
            ("bottomup.mix4", Bottomup, &u.mix4),
            ("bottomup.down4", Bottomup, &u.down4),
            ("bottomup.mix5", Bottomup, &u.mix5),
            ("head.p3", Head, &h.p3),
            ("head.p4", Head, &h.p4),
            ("head.p5", Head, &h.p5),
        ]
    }

    pub fn layers_mut(&mut self) -> Vec<LayerMut<'_, T>> {
        use ParamGroup::*;
        let self::Backbone { stem: [s0, s1, s2], stage4, stage5 } = &mut self.backbone;
        let t = &mut self.topdown;
        let u = &mut self.bottomup;
        let h = &mut self.heads;
        vec![
            ("backbone.stem0", Backbone, s0),
            ("backbone.stem1", Backbone, s1),
            ("backbone.stem2", Backbone, s2),
            ("backbone.stage4", Backbone, stage4),
            ("backbone.stage5", Backbone, stage5),
            ("topdown.lat5", Topdown, &mut t.lat5),
            ("topdown.lat4", Topdown, &mut t.lat4),
            ("topdown.lat3", Topdown, &mut t.lat3),
            ("topdown.mix4", Topdown, &mut t.mix4),
            ("topdown.mix3", Topdown, &mut t.mix3),
            ("bottomup.mix3", Bottomup, &mut u.mix3),
            ("bottomup.down3", Bottomup, &mut u.down3),
            ("bottomup.mix4", Bottomup, &mut u.mix4),
            ("bottomup.down4", Bottomup, &mut u.down4),
            ("bottomup.mix5", Bottomup, &mut u.mix5),
            ("head.p3", Head, &mut h.p3),
            ("head.p4", Head, &mut h.p4),
            ("head.p5", Head, &mut h.p5),
        ]
    }

    /// Visits every parameter array in a fixed order, α last.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, ParamGroup, &[T])) {
        for (name, group, layer) in self.layers() {
            f(&format!("{name}.weight"), group, &layer.weight);
            f(&format!("{name}.bias"), group, &layer.bias);
        }
        f("fusion.alpha45", ParamGroup::Fusion, std::slice::from_ref(&self.fusion.alpha45));
        f("fusion.alpha34", ParamGroup::Fusion, std::slice::from_ref(&self.fusion.alpha34));
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamGroup, &mut [T])) {
        for (name, group, layer) in self.layers_mut() {
            f(&format!("{name}.weight"), group, &mut layer.weight);
            f(&format!("{name}.bias"), group, &mut layer.bias);
        }
        f("fusion.alpha45", ParamGroup::Fusion, std::slice::from_mut(&mut self.fusion.alpha45));
        f("fusion.alpha34", ParamGroup::Fusion, std::slice::from_mut(&mut self.fusion.alpha34));
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, v| n += v.len());
        n
    }

    /// All parameters of one group, concatenated in visit order.
    pub fn group_values(&self, group: ParamGroup) -> Vec<T> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, g, v| {
            if g == group {
                out.extend_from_slice(v);
            }
        });
        out
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<Trace<T>> {
        if x.shape() != [INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE] {
            return Err(FusionError::Shape(format!(
                "model input must be [{INPUT_CHANNELS}, {INPUT_SIZE}, {INPUT_SIZE}], got {:?}",
                x.shape()
            )));
        }
        let backbone = self.backbone.forward(x)?;
        let topdown = self.topdown.forward(&backbone.c3, &backbone.c4, &backbone.c5, &self.fusion)?;
        let bottomup = self.bottomup.forward(&topdown.p3, &topdown.p4, &topdown.p5)?;
        let outputs = [
            self.heads.p3.forward(&bottomup.p3)?,
            self.heads.p4.forward(&bottomup.p4)?,
            self.heads.p5.forward(&bottomup.p5)?,
        ];
        Ok(Trace { backbone, topdown, bottomup, outputs })
    }

    /// Parameter gradients given the loss gradient at the head outputs.
    pub fn backward(&self, t: &Trace<T>, head_grads: &[FeatureMap<T>; 3]) -> Result<ToyModel<T>> {
        let mut g = self.zeros_like();
        let bu = &t.bottomup;
        let mut level_grads = Vec::with_capacity(3);
        for (i, input) in [&bu.p3, &bu.p4, &bu.p5].into_iter().enumerate() {
            let (layer, slot) = match i {
                0 => (&self.heads.p3, &mut g.heads.p3),
                1 => (&self.heads.p4, &mut g.heads.p4),
                _ => (&self.heads.p5, &mut g.heads.p5),
            };
            let (gx, gp) = layer.backward(input, &head_grads[i])?;
            accumulate(slot, &gp.weight, &gp.bias);
            level_grads.push(gx);
        }
        let (g3t, g4t, g5t) =
            self.bottomup.backward(bu, &level_grads[0], &level_grads[1], &level_grads[2], &mut g.bottomup)?;
        let mut g_fusion = g.fusion;
        let (g3, g4, g5) =
            self.topdown.backward(&t.topdown, &self.fusion, &g3t, &g4t, &g5t, &mut g.topdown, &mut g_fusion)?;
        g.fusion = g_fusion;
        self.backbone.backward(&t.backbone, &g3, &g4, &g5, &mut g.backbone)?;
        Ok(g)
    }

    /// Mean over the batch of the summed per-level losses.
    pub fn loss(&self, batch: &[Sample<T>]) -> Result<T> {
        let mut total = T::zero();
        for s in batch {
            let t = self.forward(&s.image)?;
            for (out, tgt) in t.outputs.iter().zip(&s.targets) {
                total += level_loss(out, tgt).0;
            }
        }
        Ok(total / T::from_usize_lossy(batch.len().max(1)))
    }

    pub fn loss_and_grad(&self, batch: &[Sample<T>]) -> Result<(T, ToyModel<T>)> {
        use rayon::prelude::*;
        let n = T::from_usize_lossy(batch.len().max(1));
        let per_sample: Vec<Result<(T, ToyModel<T>)>> = batch
            .par_iter()
            .map(|s| {
                let t = self.forward(&s.image)?;
                let mut loss = T::zero();
                let mut hg: Vec<FeatureMap<T>> = Vec::with_capacity(3);
                for (out, tgt) in t.outputs.iter().zip(&s.targets) {
                    let (l, g) = level_loss(out, tgt);
                    loss += l;
                    hg.push(g.scale(T::one() / n));
                }
                let hg: [FeatureMap<T>; 3] = hg.try_into().expect("three levels");
                Ok((loss, self.backward(&t, &hg)?))
            })
            .collect();
        // Ordered reduction keeps the result independent of thread timing.
        let mut total = T::zero();
        let mut grads = self.zeros_like();
        for r in per_sample {
            let (l, g) = r?;
            total += l;
            add_params(&mut grads, &g);
        }
        Ok((total / n, grads))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            mode: self.fusion.mode,
            alpha45: self.fusion.alpha45.as_f64(),
            alpha34: self.fusion.alpha34.as_f64(),
            layers: self
                .layers()
                .into_iter()
                .map(|(name, group, l)| LayerRecord {
                    name: name.to_string(),
                    group,
                    shape: [l.out_ch, l.in_ch, l.kernel, l.kernel],
                    stride: l.stride,
                    weight: l.weight.iter().map(|v| v.as_f64()).collect(),
                    bias: l.bias.iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(FusionError::Checkpoint(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                ck.format, ck.version
            )));
        }
        let mut model = Self::from_rng(&mut rng::stream(0, rng::MODEL_INIT), FusionCoefficients::adaptive(T::one()));
        let layers = model.layers_mut();
        if layers.len() != ck.layers.len() {
            return Err(FusionError::Checkpoint(format!("expected {} layers, found {}", layers.len(), ck.layers.len())));
        }
        for ((name, _, layer), rec) in layers.into_iter().zip(&ck.layers) {
            let shape = [layer.out_ch, layer.in_ch, layer.kernel, layer.kernel];
            if rec.name != name || rec.shape != shape || rec.stride != layer.stride
                || rec.weight.len() != layer.weight.len() || rec.bias.len() != layer.bias.len()
            {
                return Err(FusionError::Checkpoint(format!(
                    "layer {} {:?} does not match architecture layer {name} {shape:?}",
                    rec.name, rec.shape
                )));
            }
            layer.weight = rec.weight.iter().map(|&v| T::lit(v)).collect();
            layer.bias = rec.bias.iter().map(|&v| T::lit(v)).collect();
        }
        model.fusion = FusionCoefficients { alpha45: T::lit(ck.alpha45), alpha34: T::lit(ck.alpha34), mode: ck.mode };
        if !model.is_finite() {
            return Err(FusionError::Checkpoint("non-finite parameter".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.to_checkpoint()).expect("checkpoint serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| FusionError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FusionError::Io(format!("{}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| FusionError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ck)
    }
}

/// `dst += src` over every parameter.
pub(crate) fn add_params<T: Scalar>(dst: &mut ToyModel<T>, src: &ToyModel<T>) {
    let mut flat = Vec::with_capacity(src.param_count());
    src.visit_params(&mut |_, _, v| flat.extend_from_slice(v));
    let mut i = 0;
    dst.visit_params_mut(&mut |_, _, v| {
        for x in v.iter_mut() {
            *x += flat[i];
            i += 1;
        }
    });
}

/// Per-level loss and its gradient: mean over cells of the squared
/// objectness error plus the squared box error on positive cells.
pub fn level_loss<T: Scalar>(out: &FeatureMap<T>, tgt: &LevelTargets<T>) -> (T, FeatureMap<T>) {
    let [_, h, w] = out.shape();
    let cells = h * w;
    let inv = T::one() / T::from_usize_lossy(cells);
    let two = T::lit(2.0);
    let o = out.data();
    let mut grad = FeatureMap::zeros(HEAD_CHANNELS, h, w);
    let g = grad.data_mut();
    let mut loss = T::zero();
    for cell in 0..cells {
        let e = o[cell] - tgt.obj[cell];
        loss += e * e;
        g[cell] = two * e * inv;
        let m = tgt.obj[cell];
        if m > T::zero() {
            for k in 0..4 {
                let idx = (k + 1) * cells + cell;
                let e = o[idx] - tgt.boxes[k * cells + cell];
                loss += m * e * e;
                g[idx] = two * m * e * inv;
            }
        }
    }
    (loss * inv, grad)
}

pub const CHECKPOINT_FORMAT: &str = "uavsim-fusionnet";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub group: ParamGroup,
    /// `(out_ch, in_ch, k, k)`
    pub shape: [usize; 4],
    pub stride: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Serialized parameters; JSON floats round-trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub mode: FusionMode,
    pub alpha45: f64,
    pub alpha34: f64,
    pub layers: Vec<LayerRecord>,
}
