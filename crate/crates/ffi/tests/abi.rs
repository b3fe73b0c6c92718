use std::ffi::{CStr, CString};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::ptr;

use cia_bench_ffi::*;

fn last_error() -> String {
    let p = cia_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn write_toy_data(root: &Path) {
    let mut lines = String::new();
    for u in 0..24 {
        for i in 0..20 {
            if i % 3 == u % 3 || (u + i) % 5 == 0 {
                lines.push_str(&format!("{u}\t{i}\t{}\n", u * 100 + i));
            }
        }
    }
    fs::create_dir_all(root.join("toy")).unwrap();
    fs::write(root.join("toy/c.tsv"), lines).unwrap();
}

const TOY: &str = r#"
name = "ffi"

[dataset]
name = "toy"
format = "checkin_tsv"
path = "toy/c.tsv"

[matrix]
protocols = [{ kind = "fed", rounds = 3, eval_every = 1 }]
defenses = [{ kind = "none" }, { kind = "share_less", tau = 0.03 }]

[train]
dim = 4

[adversary]
K = 4
n_adversaries = 3
"#;

#[test]
fn full_round_trip_through_the_c_api() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_data(dir.path());
    let toml = CString::new(TOY).unwrap();
    let root = CString::new(dir.path().to_str().unwrap()).unwrap();
    let out_dir = CString::new(dir.path().join("out").to_str().unwrap()).unwrap();

    unsafe {
        let mut exp = ptr::null_mut();
        assert_eq!(cia_experiment_from_toml(toml.as_ptr(), &mut exp), CiaStatus::Ok);
        let mut n = 0usize;
        assert_eq!(cia_experiment_n_cells(exp, &mut n), CiaStatus::Ok);
        assert_eq!(n, 2);

        let mut report = ptr::null_mut();
        let s = cia_experiment_run(exp, root.as_ptr(), 0, out_dir.as_ptr(), &mut report);
        assert_eq!(s, CiaStatus::Ok, "{}", last_error());
        assert!(dir.path().join("out/report.json").exists());

        let mut complete = false;
        assert_eq!(cia_report_complete(report, &mut complete), CiaStatus::Ok);
        assert!(complete);
        assert_eq!(cia_report_n_cells(report, &mut n), CiaStatus::Ok);
        assert_eq!(n, 2);

        let mut summary = std::mem::zeroed::<CiaCellSummary>();
        assert_eq!(cia_report_cell_summary(report, 0, &mut summary), CiaStatus::Ok);
        assert!(summary.complete);
        assert!((0.0..=1.0).contains(&summary.max_aac));
        assert!(summary.max_aac <= summary.upper_bound + 1e-12);
        assert_eq!(cia_report_cell_summary(report, 2, &mut summary), CiaStatus::OutOfRange);

        let mut json = ptr::null_mut();
        assert_eq!(cia_report_to_json(report, &mut json), CiaStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        cia_string_free(json);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["cells"].as_array().unwrap().len(), 2);

        // the in-memory run matches the one written to disk
        let mut again = ptr::null_mut();
        assert_eq!(cia_experiment_run(exp, root.as_ptr(), 0, ptr::null(), &mut again), CiaStatus::Ok);
        let mut json2 = ptr::null_mut();
        assert_eq!(cia_report_to_json(again, &mut json2), CiaStatus::Ok);
        let v2: serde_json::Value = serde_json::from_str(CStr::from_ptr(json2).to_str().unwrap()).unwrap();
        cia_string_free(json2);
        for i in 0..2 {
            assert_eq!(v["cells"][i]["body"], v2["cells"][i]["body"]);
        }

        let write_dir = CString::new(dir.path().join("copy").to_str().unwrap()).unwrap();
        assert_eq!(cia_report_write(again, write_dir.as_ptr()), CiaStatus::Ok);
        assert!(dir.path().join("copy/summary.csv").exists());

        cia_report_free(report);
        cia_report_free(again);
        cia_experiment_free(exp);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let mut exp = ptr::null_mut();
        assert_eq!(cia_experiment_from_toml(ptr::null(), &mut exp), CiaStatus::NullPointer);
        assert!(last_error().contains("toml"));

        let bad = CString::new("[protocol]\nkind = \"fed\"\nrounds = \"many\"\n").unwrap();
        assert_eq!(cia_experiment_from_toml(bad.as_ptr(), &mut exp), CiaStatus::Config);
        assert!(exp.is_null());

        let invalid_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(cia_experiment_from_toml(invalid_utf8.as_ptr().cast(), &mut exp), CiaStatus::InvalidUtf8);

        let missing = CString::new("/no/such/config.toml").unwrap();
        assert_eq!(cia_experiment_from_file(missing.as_ptr(), &mut exp), CiaStatus::Io);

        let no_data = CString::new(TOY).unwrap();
        assert_eq!(cia_experiment_from_toml(no_data.as_ptr(), &mut exp), CiaStatus::Ok);
        let nowhere = CString::new("/no/such/root").unwrap();
        let mut report = ptr::null_mut();
        assert_eq!(cia_experiment_run(exp, nowhere.as_ptr(), 0, ptr::null(), &mut report), CiaStatus::MissingDataset);
        assert!(last_error().contains("toy"));
        assert!(report.is_null());
        cia_experiment_free(exp);

        let mut n = 0usize;
        assert_eq!(cia_experiment_n_cells(ptr::null(), &mut n), CiaStatus::NullPointer);
        assert_eq!(cia_report_n_cells(ptr::null(), &mut n), CiaStatus::NullPointer);

        // freeing null is a no-op
        cia_experiment_free(ptr::null_mut());
        cia_report_free(ptr::null_mut());
        cia_string_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(cia_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/cia_bench.h");
    let text = fs::read_to_string(&header).unwrap();
    for name in [
        "cia_last_error",
        "cia_string_free",
        "cia_experiment_from_file",
        "cia_experiment_from_toml",
        "cia_experiment_run",
        "cia_experiment_free",
        "cia_report_cell_summary",
        "cia_report_to_json",
        "cia_report_free",
        "typedef struct CiaExperiment CiaExperiment;",
        "CIA_STATUS_MISSING_DATASET = 4",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }

    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; syntax check skipped");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    fs::write(
        &src,
        "#include \"cia_bench.h\"\nint main(void) {\n  CiaExperiment *e = 0;\n  CiaStatus s = cia_experiment_from_toml(\"\", &e);\n  cia_experiment_free(e);\n  return s == CIA_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    let o = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "clang", "gcc"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
