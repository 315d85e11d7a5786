//! Maintainer tool: regenerate the bundled application-format demo data
//! under `configs/appdemo/`. Run manually with
//! `cargo test -p mfamm-core --test regenerate_fixtures -- --ignored`.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
#[ignore]
fn regenerate_app_demo_fixture() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/appdemo");
    std::fs::create_dir_all(&root).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(880_000);
    let demo = common::generate_app_demo(4, 3, &mut rng);
    mfamm_core::funcdata::write_long_csv(&demo.dataset, &root.join("dataset.csv")).unwrap();
    demo.covariates
        .write_csv(&root.join("covariates.csv"))
        .unwrap();
    println!(
        "wrote {} rows for {} sites x {} years",
        demo.dataset.observations().len(),
        demo.n_sites,
        demo.n_years
    );
}
