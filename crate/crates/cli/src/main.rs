use clap::Parser;

fn main() {
    let cli = match uavsim_cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprint!("{}", e.render());
            eprintln!("{}", uavsim_cli::usage_error(&e.kind().to_string()).machine_line());
            std::process::exit(2);
        }
    };
    uavsim_cli::init_logging(cli.global.verbose);
    if let Err(e) = uavsim_cli::run(&cli) {
        eprintln!("{}", e.machine_line());
        std::process::exit(e.exit_code());
    }
}
