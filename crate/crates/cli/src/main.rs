use clap::Parser;

fn main() {
    let cli = spvae_cli::Cli::parse();
    match spvae_cli::run(cli) {
        Ok(msg) => println!("{msg}"),
        Err(f) => {
            eprintln!("error: {}", f.message);
            std::process::exit(f.code);
        }
    }
}
