use clap::Parser;

use spinchern_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli.command, &cli.common) {
        Ok(manifest) => {
            for o in &manifest.outputs {
                println!("{}  {}", o.sha256, cli.common.out.join(&o.file).display());
            }
        }
        Err(e) => {
            eprintln!("spinchern: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
