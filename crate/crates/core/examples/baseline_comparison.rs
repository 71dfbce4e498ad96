//! Every method on one spec through the experiment driver, merged into one CSV.
use fedmatch::cli::{compare, parse_spec};
use fedmatch::federation::Method;

fn main() -> fedmatch::Result<()> {
    let spec = parse_spec(
        r#"{
          "repetitions": 2,
          "data": {"n_per_class": 150},
          "round": {"rounds": 20, "lr": 0.03, "local_epochs": 2, "loss": {"lambda_l2": 0}}
        }"#,
    )?;
    let out = std::env::temp_dir().join("fedmatch-compare");
    for s in compare(&spec, &Method::ALL, &out)? {
        println!(
            "{:17} test acc {:.3} ± {:.3}, mean s2c {:.1}%, mean c2s {:.1}%",
            s.method.as_str(),
            s.final_test_acc.mean,
            s.final_test_acc.std,
            s.s2c_pct.mean,
            s.c2s_pct.mean
        );
    }
    println!("merged metrics in {}", out.join("compare.csv").display());
    Ok(())
}
