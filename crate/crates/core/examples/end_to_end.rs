//! The command-line workflow driven in-process: generate, train,
//! pseudo-label, evaluate and report, all under a temporary directory.
//!
//! ```bash
//! cargo run --release --example end_to_end
//! ```
//!
//! The same steps with the binary:
//!
//! ```bash
//! explainseg phantom-gen --out data/train --count 160 --seed 11
//! explainseg phantom-gen --out data/eval --count 8 --seed 99
//! explainseg train --data data/train --out model.json
//! explainseg pseudolabel --data data/eval --model model.json --out runs/a --t-high 0.05
//! explainseg eval --pred runs/a --gt data/eval --out runs/a/eval.json
//! explainseg report --runs runs/a --out report
//! ```

use explainseg::cli::run;

fn step(args: &[&str]) {
    println!("$ explainseg {}", args.join(" "));
    let code = run(std::iter::once("explainseg").chain(args.iter().copied()));
    assert_eq!(code, 0, "step failed");
}

fn main() {
    let root = std::env::temp_dir().join(format!("explainseg-e2e-{}", std::process::id()));
    let p = |s: &str| root.join(s).display().to_string();
    step(&["phantom-gen", "--out", &p("train"), "--count", "160", "--seed", "11"]);
    step(&["phantom-gen", "--out", &p("eval"), "--count", "8", "--seed", "99"]);
    step(&["train", "--data", &p("train"), "--out", &p("model.json")]);
    step(&["pseudolabel", "--data", &p("eval"), "--model", &p("model.json"), "--out", &p("run"), "--t-high", "0.05"]);
    step(&["eval", "--pred", &p("run"), "--gt", &p("eval"), "--out", &p("run/eval.json")]);
    step(&["report", "--runs", &p("run"), "--out", &p("report")]);
    for f in ["summary.csv", "iterations.csv"] {
        println!("\n{f}:\n{}", std::fs::read_to_string(root.join("report").join(f)).expect("report file"));
    }
    println!("artifacts left in {}", root.display());
}
