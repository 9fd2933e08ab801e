use clap::Parser;

fn main() {
    let cli = rindnet::cli::Cli::parse();
    if let Err(e) = cli.run() {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(e.exit_code());
    }
}
