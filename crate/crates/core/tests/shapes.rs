use std::path::PathBuf;

use lsbq_core::accounting::{param_accounting, resnet18, resnet20, resnet50, ShapeTable};

fn shipped(name: &str) -> ShapeTable {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../shapes")
        .join(format!("{name}.json"));
    serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap()
}

#[test]
fn shipped_tables_match_generators() {
    for (name, table) in [
        ("resnet20", resnet20()),
        ("resnet18", resnet18()),
        ("resnet50", resnet50()),
    ] {
        assert_eq!(shipped(name), table, "{name}");
    }
}

#[test]
fn shipped_totals_match_reference_counts() {
    for (name, total) in [
        ("resnet20", 269_722),
        ("resnet18", 11_689_512),
        ("resnet50", 25_557_032),
    ] {
        let t = shipped(name);
        assert_eq!(t.total(), total, "{name}");
        let acc = param_accounting(&t.counts(), 8).unwrap();
        assert_eq!(acc.per_weight_params, total as u64);
        assert_eq!(acc.bit_split_params, 8 * total as u64);
        assert_eq!(acc.ratio, 8.0);
    }
}
