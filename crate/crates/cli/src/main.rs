use clap::Parser;
use condsynth_cli::{logging, run, Cli};

fn main() {
    let cli = Cli::parse();
    logging::init();
    match run(&cli) {
        Ok(Some(dir)) => println!("{}", dir.display()),
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
