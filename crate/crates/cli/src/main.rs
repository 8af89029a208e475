use clap::Parser;
use painet_cli::args::Cli;

fn main() {
    let cli = Cli::parse();
    match painet_cli::run(&cli) {
        Ok(msg) => {
            if !msg.is_empty() {
                println!("{msg}");
            }
        }
        Err(e) => {
            eprintln!("painet {}: {e}", cli.command.name());
            std::process::exit(e.exit_code());
        }
    }
}
