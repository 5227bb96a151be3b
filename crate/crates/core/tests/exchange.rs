use std::fs;
use std::io::BufReader;
use std::path::Path;

use serde_json::json;
use tempfile::TempDir;
use twistor_core::exchange::{read_binary, read_csv, write_binary, write_csv};
use twistor_core::fixtures::{fixture_samples, load_fixtures, FixtureKind};
use twistor_core::forms::hodge_star;
use twistor_core::{DiscreteForm, FactorSpec, ProductGeometry};

fn s2t1() -> std::sync::Arc<ProductGeometry> {
    ProductGeometry::build(&[FactorSpec::sphere(1.0, 8, 16), FactorSpec::unit_torus(1, 6)], None).unwrap()
}

#[test]
fn files_roundtrip_every_degree() {
    let g = s2t1();
    let dir = TempDir::new().unwrap();
    for p in 0..=3 {
        let u = DiscreteForm::random(&g, p, 100 + p as u64).unwrap();
        let csv = dir.path().join(format!("u{p}.csv"));
        let bin = dir.path().join(format!("u{p}.bin"));
        write_csv(&u, fs::File::create(&csv).unwrap()).unwrap();
        write_binary(&u, fs::File::create(&bin).unwrap()).unwrap();
        let from_csv = read_csv(&g, BufReader::new(fs::File::open(&csv).unwrap())).unwrap();
        let from_bin = read_binary(&g, fs::File::open(&bin).unwrap()).unwrap();
        assert_eq!(from_csv, u);
        assert_eq!(from_bin, u);
    }
}

#[test]
fn csv_header_describes_the_grid() {
    let g = s2t1();
    let mut buf = Vec::new();
    write_csv(&DiscreteForm::zeros(&g, 2).unwrap(), &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let header: Vec<&str> = text.lines().take_while(|l| l.starts_with('#')).collect();
    assert_eq!(header.len(), 5);
    assert!(header.contains(&"# degree: 2"));
    assert!(header.contains(&format!("# n_points: {}", g.n_points()).as_str()));
    assert_eq!(text.lines().nth(5), Some("point,multi_index,coefficient"));
    assert_eq!(text.lines().nth(6).unwrap().split(',').nth(1), Some("1 2"));
}

#[test]
fn binary_from_other_grid_is_rejected() {
    let g = s2t1();
    let other = ProductGeometry::build(&[FactorSpec::sphere(1.0, 4, 8), FactorSpec::unit_torus(1, 6)], None).unwrap();
    let mut buf = Vec::new();
    write_binary(&DiscreteForm::zeros(&other, 1).unwrap(), &mut buf).unwrap();
    assert!(read_binary(&g, buf.as_slice()).is_err());
}

#[test]
fn committed_mode_tables_load_and_agree() {
    let fixtures = load_fixtures(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")).unwrap();
    assert_eq!(fixtures.len(), 4);
    for fx in &fixtures {
        assert_eq!(fx.kind, FixtureKind::ModeTable);
        assert!(fx.mode_table_agrees().unwrap(), "{}", fx.name);
        assert_eq!(fx.mode_table.as_ref().unwrap().support().count(), 1);
    }
}

#[test]
fn sampled_fixture_feeds_calibration() {
    let g = s2t1();
    let dir = TempDir::new().unwrap();
    let vol = DiscreteForm::basis(&g, 0b011).unwrap();
    let dual = hodge_star(&vol);
    let mut tables = Vec::new();
    for (i, u) in [&vol, &dual].into_iter().enumerate() {
        let name = format!("parallel{i}.{}", if i == 0 { "csv" } else { "bin" });
        let file = fs::File::create(dir.path().join(&name)).unwrap();
        if i == 0 {
            write_csv(u, file).unwrap();
        } else {
            write_binary(u, file).unwrap();
        }
        tables.push(name);
    }
    let doc = json!({
        "version": 1,
        "name": "area-and-dual",
        "manifold": {"factors": g.factor_specs(), "conformal_exponent": null},
        "kind": "parallel_form",
        "expressions": ["dtheta^dphi (unit sphere area form)", "dt"],
        "dimension": 2,
        "derivation": "constant frame coefficients",
        "tables": tables,
    });
    fs::write(dir.path().join("area.json"), doc.to_string()).unwrap();
    let fixtures = load_fixtures(dir.path()).unwrap();
    let forms = fixtures[0].forms(&g).unwrap();
    assert_eq!(forms[0], vol);
    assert_eq!(forms[1], dual);
    let samples = fixture_samples(&fixtures, &g).unwrap();
    assert_eq!(samples.len(), 2);
    assert!(samples.iter().all(|s| s.relative_residual < 1e-12), "{samples:?}");
}

#[test]
fn fixture_with_wrong_table_count_is_rejected() {
    let dir = TempDir::new().unwrap();
    let doc = json!({
        "version": 1,
        "name": "short",
        "manifold": {"factors": [FactorSpec::sphere(1.0, 8, 16)]},
        "kind": "killing_1form",
        "dimension": 3,
        "tables": ["only-one.csv"],
    });
    fs::write(dir.path().join("short.json"), doc.to_string()).unwrap();
    assert!(load_fixtures(dir.path()).is_err());
}
