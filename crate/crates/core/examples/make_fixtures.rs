//! Regenerates the shipped fixture tree: `cargo run -p egmt --example make_fixtures`.

fn main() -> egmt::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(egmt::fixtures::shipped_root);
    egmt::fixtures::generate(&root)?;
    println!("wrote {}", root.display());
    Ok(())
}
