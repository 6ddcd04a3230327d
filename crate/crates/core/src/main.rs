use clap::Parser;
use horkd::runner::{run, Cli, EXIT_CONFIG};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are config errors; --help and --version are not
            std::process::exit(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    std::process::exit(run(&cli));
}
