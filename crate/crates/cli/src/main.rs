use clap::Parser;

fn main() -> anyhow::Result<()> {
    vqcount_cli::run(vqcount_cli::Cli::parse())
}
