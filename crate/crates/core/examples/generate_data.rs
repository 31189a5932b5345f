//! Generates the planted dataset, writes it to a directory and reads it back.
//!
//! `cargo run --release --example generate_data [-- <out-dir>]`

use mbdiff::data::{gen_synthetic, load_dataset, write_header, write_interactions, header_path, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir: std::path::PathBuf = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("mbdiff-data"), Into::into);
    std::fs::create_dir_all(&dir)?;
    let synth = gen_synthetic(&SyntheticSpec::planted(7))?;
    let path = dir.join("synthetic.tsv");
    write_interactions(&path, &synth.users)?;
    write_header(&header_path(&path), &synth.header)?;

    let back = load_dataset(&path)?;
    assert_eq!(back.users, synth.users);
    println!("wrote {} interactions for {} users to {}", back.num_interactions(), back.users.len(), path.display());
    for b in 0..back.header.num_behaviors {
        let n = back.interactions().filter(|it| it.behavior_id as usize == b).count();
        println!("  {:<6} {n}", back.header.behavior_name(b));
    }
    println!("planted purity {:.3}", synth.manifest.purity(back.interactions()));
    println!("user 0 is archetype {}; its buy cluster is {:?}", synth.manifest.archetype(0), synth.manifest.cluster(synth.manifest.archetype(0), 3));
    Ok(())
}
