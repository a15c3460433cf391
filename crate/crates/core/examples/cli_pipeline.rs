//! The command-line workflow end to end at toy scale, driven in-process:
//! generate, train, evaluate, optimize, report.

use auxbo::cli::run;

fn main() {
    let dir = std::env::temp_dir().join("auxbo-cli-example");
    let p = |rel: &str| dir.join(rel).display().to_string();
    std::fs::create_dir_all(&dir).expect("temp dir");
    std::fs::write(
        dir.join("config.json"),
        r#"{"seed": 3, "train": {"max_epochs": 3},
            "model": {"model_dim": 16, "predictor_layers": 1, "sequence_encoder_layers": 1, "ff_dim": 32},
            "sampler": {"target_size": 30}}"#,
    )
    .expect("write config");
    let cfg = p("config.json");
    let steps: Vec<Vec<String>> = vec![
        vec!["gen".into(), "--out".into(), p("data"), "--train".into(), "16".into(), "--val".into(), "4".into(), "--test".into(), "3".into(), "--pool".into(), "96".into()],
        vec!["train".into(), "--data".into(), p("data"), "--config".into(), cfg.clone(), "--out".into(), p("model/aux.bin")],
        vec!["eval-pred".into(), "--model".into(), p("model/aux.bin"), "--data".into(), p("data"), "--config".into(), cfg.clone(), "--sizes".into(), "5,20".into(), "--repeats".into(), "2".into(), "--out".into(), p("eval.csv")],
        vec!["optimize".into(), "--model".into(), p("model/aux.bin"), "--data".into(), p("data"), "--config".into(), cfg.clone(), "--trials".into(), "10".into(), "--runs".into(), "2".into(), "--out".into(), p("opt_aux.csv")],
        vec!["optimize".into(), "--stgp".into(), "--data".into(), p("data"), "--config".into(), cfg.clone(), "--trials".into(), "10".into(), "--runs".into(), "2".into(), "--out".into(), p("opt_stgp.csv")],
        vec!["report".into(), "--in".into(), p("opt_aux.csv"), p("opt_stgp.csv"), "--out".into(), p("report")],
    ];
    for args in steps {
        println!("$ auxbo {}", args.join(" "));
        let code = run(std::iter::once("auxbo".to_string()).chain(args));
        assert_eq!(code, 0, "command failed");
    }
    print!("{}", std::fs::read_to_string(dir.join("eval.csv")).expect("eval table"));
    println!("charts in {}", dir.join("report").display());
}
