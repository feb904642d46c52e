//! Synthetic party data for demos and tests, and a writer that turns a
//! dataset into the CSV and schema files a job config points at.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::alignment::party_rng;
use crate::model_federation::sigmoid;
use crate::sandbox::{Normalization, PartyDataset};
use crate::transport::PartyId;

/// Writes `<stem>.csv` (columns `id`, features, optional `label_name`) and a
/// matching `<stem>.schema.toml`. Values are printed exactly (shortest
/// round-trip form).
pub fn write_party(ds: &PartyDataset, dir: &Path, stem: &str, label_name: &str, normalize: Normalization) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
    let mut header = vec!["id".to_string()];
    header.extend(ds.feature_names().iter().map(|s| s.to_string()));
    if ds.labels().is_some() {
        header.push(label_name.into());
    }
    w.write_record(&header)?;
    let rows = ds.rows();
    for (i, id) in ds.entity_ids().iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(rows[i].iter().map(|v| v.to_string()));
        if let Some(y) = ds.labels() {
            rec.push(y[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;

    let norm = match normalize {
        Normalization::Zscore => "zscore",
        Normalization::Minmax => "minmax",
        Normalization::None => "none",
    };
    let mut s = String::from("[[column]]\nname = \"id\"\nkind = \"id\"\n");
    for (name, values) in ds.columns() {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // generous declared range: the observed one widened to whole units
        let _ = write!(
            s,
            "\n[[column]]\nname = \"{name}\"\nkind = \"numeric\"\nnormalize = \"{norm}\"\nmin = {:?}\nmax = {:?}\n",
            lo.floor() - 1.0,
            hi.ceil() + 1.0
        );
    }
    if ds.labels().is_some() {
        let _ = write!(s, "\n[[column]]\nname = \"{label_name}\"\nkind = \"label\"\n");
    }
    std::fs::write(dir.join(format!("{stem}.schema.toml")), s)
}

/// Two-party credit data. The bank holds the default label and its own
/// customer attributes; the bureau holds payment history for most of the
/// bank's customers plus some it does not share. Each side has one column
/// unrelated to the label. Both row orders are shuffled.
pub fn credit_scenario(n: usize, seed: u64) -> (PartyDataset, PartyDataset) {
    let mut rng = party_rng(seed, &PartyId::new("dataset"), "credit");
    let std: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    let mut bank_rows = Vec::with_capacity(n);
    let mut bureau_rows = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("cust-{i:05}");
        let income = (50.0 + 15.0 * std.sample(&mut rng)).max(5.0);
        let debt_ratio: f64 = rng.gen_range(0.0..1.0);
        let age = rng.gen_range(21..70) as f64;
        let branch = rng.gen_range(0..20) as f64;
        let late = (2.0 * std.sample(&mut rng)).abs().floor();
        let lines = rng.gen_range(1..11) as f64;
        let inquiries = rng.gen_range(0..7) as f64;
        let zip = rng.gen_range(0..10) as f64;
        let logit = -0.4 - 0.05 * (income - 50.0) + 3.0 * (debt_ratio - 0.5) - 0.02 * (age - 45.0)
            + 0.7 * (late - 1.6)
            + 0.35 * (inquiries - 3.0)
            - 0.1 * (lines - 5.5);
        let y = (rng.gen::<f64>() < sigmoid(logit)) as u8;
        bank_rows.push((id.clone(), [income, debt_ratio, age, branch], y));
        // about 90% of customers are known to the bureau
        if rng.gen::<f64>() < 0.9 {
            bureau_rows.push((id, [late, lines, inquiries, zip]));
        }
    }
    for j in 0..n / 10 {
        let late = (2.0 * std.sample(&mut rng)).abs().floor();
        let row = [late, rng.gen_range(1..11) as f64, rng.gen_range(0..7) as f64, rng.gen_range(0..10) as f64];
        bureau_rows.push((format!("ext-{j:05}"), row));
    }
    bank_rows.shuffle(&mut rng);
    bureau_rows.shuffle(&mut rng);

    let col = |rows: &[[f64; 4]], k: usize| rows.iter().map(|r| r[k]).collect::<Vec<f64>>();
    let bank_x: Vec<[f64; 4]> = bank_rows.iter().map(|r| r.1).collect();
    let bank = PartyDataset::from_parts(
        "bank",
        bank_rows.iter().map(|r| r.0.clone()).collect(),
        ["income", "debt_ratio", "age", "branch_code"].iter().enumerate().map(|(k, n)| (n.to_string(), col(&bank_x, k))).collect(),
        Some(bank_rows.iter().map(|r| r.2).collect()),
    )
    .expect("well-formed columns");
    let bureau_x: Vec<[f64; 4]> = bureau_rows.iter().map(|r| r.1).collect();
    let bureau = PartyDataset::from_parts(
        "bureau",
        bureau_rows.iter().map(|r| r.0.clone()).collect(),
        ["late_payments", "credit_lines", "inquiries", "zip_digit"]
            .iter()
            .enumerate()
            .map(|(k, n)| (n.to_string(), col(&bureau_x, k)))
            .collect(),
        None,
    )
    .expect("well-formed columns");
    (bank, bureau)
}

/// Horizontal split of one logistic population across `parties` sites,
/// every site holding the same three features and the label.
pub fn horizontal_sites(parties: usize, rows_each: usize, seed: u64) -> Vec<PartyDataset> {
    let w = [1.2, -0.8, 0.5];
    (0..parties)
        .map(|p| {
            let id = PartyId::new(format!("site{p}"));
            let mut rng = party_rng(seed, &id, "horizontal");
            let mut cols = vec![Vec::with_capacity(rows_each); 3];
            let mut y = Vec::with_capacity(rows_each);
            for _ in 0..rows_each {
                let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let z: f64 = 0.3 + w.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>();
                for (c, v) in cols.iter_mut().zip(&x) {
                    c.push(*v);
                }
                y.push((rng.gen::<f64>() < sigmoid(z)) as u8);
            }
            let ids = (0..rows_each).map(|i| format!("{id}-{i:05}")).collect();
            let named = ["x1", "x2", "x3"].iter().map(|s| s.to_string()).zip(cols).collect();
            PartyDataset::from_parts(id.as_str(), ids, named, Some(y)).expect("well-formed columns")
        })
        .collect()
}

/// Patient records for information-level jobs: `age`, `bmi`, `smoker` and a
/// `systolic` blood pressure that is linear in the other three plus noise.
pub fn hospitals(parties: usize, rows_each: usize, seed: u64) -> Vec<PartyDataset> {
    let noise: Normal<f64> = Normal::new(0.0, 6.0).expect("valid normal");
    let bmi_dist: Normal<f64> = Normal::new(26.0, 4.0).expect("valid normal");
    (0..parties)
        .map(|p| {
            let id = PartyId::new(format!("hospital{p}"));
            let mut rng = party_rng(seed, &id, "hospital");
            let mut cols = [vec![], vec![], vec![], vec![]];
            for _ in 0..rows_each {
                let age = rng.gen_range(20..80) as f64;
                let bmi = (bmi_dist.sample(&mut rng) * 10.0).round() / 10.0;
                let smoker = (rng.gen::<f64>() < 0.25) as u8 as f64;
                let systolic = (90.0 + 0.5 * age + 0.8 * bmi + 8.0 * smoker + noise.sample(&mut rng)).round();
                for (c, v) in cols.iter_mut().zip([age, bmi, smoker, systolic]) {
                    c.push(v);
                }
            }
            let ids = (0..rows_each).map(|i| format!("{id}-p{i:04}")).collect();
            let named = ["age", "bmi", "smoker", "systolic"].iter().map(|s| s.to_string()).zip(cols).collect();
            PartyDataset::from_parts(id.as_str(), ids, named, None).expect("well-formed columns")
        })
        .collect()
}

/// `(entity, predicate, value)` facts held by one knowledge node.
pub type Facts = Vec<(String, String, f64)>;

/// Writes facts as `entity_id,predicate,value`.
pub fn write_facts(facts: &Facts, path: &Path) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["entity_id", "predicate", "value"])?;
    for (e, p, v) in facts {
        w.write_record([e.as_str(), p.as_str(), &v.to_string()])?;
    }
    w.flush()
}

/// Company facts spread over a tax office (`tax_evasion`), a court
/// (`insolvency`, only for companies with a case) and a bank (`has_loan`).
/// Exactly one company, the returned one, is both a tax evader and
/// insolvent; it also holds a loan.
pub fn tax_scenario(companies: usize, seed: u64) -> (Facts, Facts, Facts, String) {
    let mut rng = party_rng(seed, &PartyId::new("dataset"), "tax");
    let planted = rng.gen_range(0..companies);
    let (mut tax, mut court, mut bank) = (Facts::new(), Facts::new(), Facts::new());
    for c in 0..companies {
        let id = format!("co-{c:04}");
        let evader = c == planted || rng.gen::<f64>() < 0.1;
        tax.push((id.clone(), "tax_evasion".into(), evader as u8 as f64));
        if c == planted || rng.gen::<f64>() < 0.3 {
            // insolvent evaders other than the planted one are cleared
            let insolvent = c == planted || (!evader && rng.gen::<f64>() < 0.5);
            court.push((id.clone(), "insolvency".into(), insolvent as u8 as f64));
        }
        if c == planted || rng.gen::<f64>() < 0.4 {
            bank.push((id, "has_loan".into(), 1.0));
        }
    }
    tax.shuffle(&mut rng);
    court.shuffle(&mut rng);
    bank.shuffle(&mut rng);
    (tax, court, bank, format!("co-{planted:04}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::{ingest_csv, Schema};

    #[test]
    fn credit_overlap_and_labels() {
        let (bank, bureau) = credit_scenario(500, 3);
        assert_eq!(bank.n_rows(), 500);
        let shared = bureau.entity_ids().iter().filter(|i| i.starts_with("cust-")).count();
        assert!((400..=490).contains(&shared), "{shared}");
        let rate = bank.labels().unwrap().iter().map(|&y| y as f64).sum::<f64>() / 500.0;
        assert!((0.2..0.8).contains(&rate), "{rate}");
        assert_eq!(credit_scenario(500, 3), (bank, bureau));
    }

    #[test]
    fn written_files_ingest_back_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (bank, _) = credit_scenario(50, 1);
        write_party(&bank, dir.path(), "bank", "default", Normalization::Zscore).unwrap();
        let schema = Schema::load(&dir.path().join("bank.schema.toml")).unwrap();
        let back = ingest_csv(&dir.path().join("bank.csv"), &schema, PartyId::new("bank")).unwrap();
        assert_eq!(back.entity_ids(), bank.entity_ids());
        assert_eq!(back.columns(), bank.columns());
        assert_eq!(back.labels(), bank.labels());
    }

    #[test]
    fn exactly_one_company_is_both_evader_and_insolvent() {
        let (tax, court, bank, planted) = tax_scenario(300, 5);
        let flagged = |f: &Facts| f.iter().filter(|r| r.2 == 1.0).map(|r| r.0.clone()).collect::<std::collections::BTreeSet<_>>();
        let both: Vec<String> = flagged(&tax).intersection(&flagged(&court)).cloned().collect();
        assert_eq!(both, vec![planted.clone()]);
        assert!(flagged(&bank).contains(&planted));
        assert!(flagged(&tax).len() > 10 && flagged(&court).len() > 10);
    }

    #[test]
    fn hospital_columns_carry_the_linear_signal() {
        let hs = hospitals(2, 200, 1);
        let ds = &hs[1];
        let (age, sys) = (ds.column("age").unwrap(), ds.column("systolic").unwrap());
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, ms) = (mean(age), mean(sys));
        let cov: f64 = age.iter().zip(sys).map(|(a, s)| (a - ma) * (s - ms)).sum();
        assert!(cov > 0.0);
        assert_ne!(hs[0].column("age"), hs[1].column("age"));
    }
}
