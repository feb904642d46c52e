//! Regenerates the data files under `demo/`. The configs there are written
//! by hand and point at these files.
//!
//! cargo run -p kfed --example gen_demo -- demo

use std::path::{Path, PathBuf};

use kfed::cognition_federation::xor_of_views;
use kfed::sandbox::{Normalization, PartyDataset};
use kfed::synth::{credit_scenario, horizontal_sites, hospitals, tax_scenario, write_facts, write_party};

fn unlabeled(ds: &PartyDataset) -> PartyDataset {
    PartyDataset::from_parts(ds.party_id.as_str(), ds.entity_ids().to_vec(), ds.columns().to_vec(), None)
        .expect("same columns")
}

fn dir(root: &Path, name: &str) -> std::io::Result<PathBuf> {
    let d = root.join(name);
    std::fs::create_dir_all(&d)?;
    Ok(d)
}

fn main() -> std::io::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "demo".into()));
    let z = Normalization::Zscore;

    let d = dir(&root, "credit")?;
    let (bank, bureau) = credit_scenario(600, 11);
    write_party(&bank, &d, "bank", "default", z)?;
    write_party(&bureau, &d, "bureau", "", z)?;
    let (bank, bureau) = credit_scenario(120, 12);
    write_party(&unlabeled(&bank), &d, "bank_new", "", z)?;
    write_party(&bureau, &d, "bureau_new", "", z)?;

    let d = dir(&root, "horizontal")?;
    for s in horizontal_sites(4, 250, 21) {
        write_party(&s, &d, s.party_id.as_str(), "outcome", z)?;
    }
    for s in horizontal_sites(4, 40, 22) {
        write_party(&unlabeled(&s), &d, &format!("{}_new", s.party_id), "", z)?;
    }

    let d = dir(&root, "cognition")?;
    let (a, b) = xor_of_views(600, 31);
    write_party(&a, &d, "view_a", "label", z)?;
    write_party(&b, &d, "view_b", "", z)?;
    let (a, b) = xor_of_views(100, 32);
    write_party(&unlabeled(&a), &d, "view_a_new", "", z)?;
    write_party(&b, &d, "view_b_new", "", z)?;

    let d = dir(&root, "information")?;
    for h in hospitals(3, 150, 41) {
        write_party(&h, &d, h.party_id.as_str(), "", Normalization::None)?;
    }
    for h in hospitals(3, 20, 42) {
        let features = h.select_columns(&["age", "bmi", "smoker"]).expect("generated columns");
        write_party(&features, &d, &format!("{}_new", h.party_id), "", Normalization::None)?;
    }

    let d = dir(&root, "knowledge")?;
    let (tax, court, bank, planted) = tax_scenario(400, 51);
    write_facts(&tax, &d.join("tax_office.csv"))?;
    write_facts(&court, &d.join("court.csv"))?;
    write_facts(&bank, &d.join("bank.csv"))?;
    println!("planted company: {planted}");
    Ok(())
}
