use clap::Parser;
use isoprobe::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(m) => {
            for f in &m.outputs {
                println!("{}  {}", f.sha256, f.path);
            }
        }
        Err(e) => {
            eprintln!("isoprobe {}: {e}", format!("{:?}", cli.command).to_lowercase());
            std::process::exit(e.exit_code());
        }
    }
}
