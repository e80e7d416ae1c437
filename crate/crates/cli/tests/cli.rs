use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dronedet::augment::write_ppm;
use dronedet::{Grid, Shape};

fn run_in(dir: Option<&Path>, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dronedet"));
    cmd.args(args).env_remove("DRONEDET_WORKERS");
    if let Some(d) = dir {
        cmd.current_dir(d);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn run(args: &[&str]) -> Output {
    run_in(None, args, &[])
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    stdout(&o)
}

fn error_line(o: &Output) -> String {
    stderr(o).lines().last().unwrap_or("").to_string()
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let o = run(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage:"));
}

#[test]
fn usage_errors_exit_2_with_error_line() {
    let o = run(&["gen-anchors", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("error: kind=usage msg="), "{}", stderr(&o));
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["--set", "crop_prob=2", "plan-dilations"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("error: kind=config"));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.tsv");
    let o = run(&["dataset", "stats", "--input", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("error: kind=input msg="), "{}", stderr(&o));
}

#[test]
fn seed_is_echoed() {
    let o = run(&["--seed", "77", "plan-dilations"]);
    assert!(stderr(&o).lines().any(|l| l == "seed=77"));
    let o = run(&["plan-dilations"]);
    assert!(stderr(&o).lines().any(|l| l == "seed=0"));
}

#[test]
fn anchor_summary_mirrors_the_table() {
    let out = ok(&["gen-anchors", "--summary"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "# dronedet anchors-summary v1");
    let counts: Vec<&str> = lines[2..10].iter().map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(counts, ["65536", "24576", "6144", "1536", "384", "96", "16", "4"]);
    assert!(lines[2].starts_with("of_1,4,128,28(56),"));
    assert_eq!(lines[10], "total,,,,,,98292");
    let ssd = ok(&["gen-anchors", "--summary", "--layout", "ssd300"]);
    assert_eq!(ssd.lines().last().unwrap(), "total,,,,,,8732");
}

#[test]
fn anchor_csv_is_complete_and_reproducible() {
    let a = ok(&["gen-anchors"]);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "# dronedet anchors v1");
    assert_eq!(lines[1], "layer,cell_y,cell_x,ratio_tag,x_min,y_min,x_max,y_max");
    assert_eq!(lines.len() - 2, 98292);
    assert!(lines[2].starts_with("of_1,0,0,1:1,"));
    assert!(lines[5].starts_with("of_1,0,0,extra,"));
    assert_eq!(a, ok(&["gen-anchors"]));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# run\nseed = 5\nanchor_layout = ssd300\n").unwrap();
    let c = cfg.to_str().unwrap();
    let o = run(&["--config", c, "gen-anchors", "--summary"]);
    assert!(stderr(&o).contains("seed=5"));
    assert_eq!(stdout(&o).lines().last().unwrap(), "total,,,,,,8732");
    // --set beats the file, the subcommand flag beats --set
    let o = run(&["--config", c, "--set", "seed=6", "--seed", "7", "gen-anchors", "--summary", "--layout", "default"]);
    assert!(stderr(&o).contains("seed=7"));
    assert_eq!(stdout(&o).lines().last().unwrap(), "total,,,,,,98292");

    let dump = dir.path().join("dump.cfg");
    run(&["--config", c, "--dump-config", dump.to_str().unwrap(), "plan-dilations"]);
    let text = fs::read_to_string(&dump).unwrap();
    assert!(text.starts_with("# dronedet config v1\n"));
    assert!(text.contains("anchor_layout = ssd300") && text.contains("train.momentum = 0.9"));
    let again = dir.path().join("again.cfg");
    run(&["--config", dump.to_str().unwrap(), "--dump-config", again.to_str().unwrap(), "plan-dilations"]);
    assert_eq!(fs::read_to_string(&again).unwrap(), text);

    fs::write(&cfg, "seed = x\n").unwrap();
    let o = run(&["--config", c, "plan-dilations"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("error: kind=config"));
}

#[test]
fn dilation_commands() {
    let out = ok(&["plan-dilations"]);
    assert!(out.starts_with("# dronedet dilation-plan v1\n"));
    assert!(out.contains("rates=1,2,3\n") && out.contains("hdc=pass\n") && out.contains("holes=0\n"));
    let out = ok(&["plan-dilations", "--depth", "2"]);
    assert!(out.contains("rates=1,2\n"));
    let out = ok(&["plan-dilations", "--rates", "3,3,3"]);
    assert!(out.contains("hdc=fail\n"));

    let dir = tempfile::tempdir().unwrap();
    let svg = dir.path().join("c.svg");
    let out = ok(&["coverage-map", "--rates", "1,2,3", "--svg", svg.to_str().unwrap()]);
    assert!(out.starts_with("# dronedet coverage-summary v1\n"));
    assert!(out.contains("holes=false\n") && out.contains("total=729\n"));
    assert!(fs::read_to_string(svg).unwrap().starts_with("<!-- dronedet coverage-map v1 -->"));
    let out = ok(&["coverage-map", "--rates", "2,2"]);
    assert!(out.contains("holes=true\n"));
    let o = run(&["coverage-map", "--rates", "1,0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validate_arch_prints_the_pyramid() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("g.arch");
    let o = run(&["validate-arch", "--dump", dump.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "# dronedet arch-table v1");
    for (k, line) in lines[2..10].iter().enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[2], (4 << k).to_string());
        assert_eq!(f[3], (128 >> k).to_string());
    }
    assert_eq!(lines[10], "total,,,,,,98292");
    assert!(stderr(&o).contains("check strides=pass") && stderr(&o).contains("check hdc.center=pass"));
    assert!(fs::read_to_string(dump).unwrap().starts_with("# dronedet arch v1"));
}

fn voc(file: &str, w: u32, h: u32, boxes: &[[u32; 4]], bg: &str) -> String {
    let mut s = format!(
        "<annotation><filename>{file}</filename><size><width>{w}</width><height>{h}</height></size><background>{bg}</background>"
    );
    for b in boxes {
        s += &format!(
            "<object><name>drone</name><bndbox><xmin>{}</xmin><ymin>{}</ymin><xmax>{}</xmax><ymax>{}</ymax></bndbox></object>",
            b[0], b[1], b[2], b[3]
        );
    }
    s + "</annotation>"
}

/// Twenty 64x48 images with one or two drones each, plus their PPM files.
fn fixture(root: &Path) {
    for i in 0..20u32 {
        let boxes = if i % 3 == 0 {
            vec![[2 + i, 3, 20 + i, 30], [30, 10, 60, 47]]
        } else {
            vec![[4, 4 + i, 36, 16 + i]]
        };
        let bg = if i % 2 == 0 { "city" } else { "field" };
        fs::write(root.join(format!("img{i:02}.xml")), voc(&format!("img{i:02}.ppm"), 64, 48, &boxes, bg)).unwrap();
        let image = Grid::from_fn(Shape::new(3, 48, 64), |c, y, x| ((c * 31 + y * 7 + x * 3 + i as usize) % 256) as f64 / 255.0).unwrap();
        write_ppm(&image, fs::File::create(root.join(format!("img{i:02}.ppm"))).unwrap()).unwrap();
    }
}

fn ingest_fixture(dir: &Path) -> String {
    fixture(dir);
    let out = dir.join("all.tsv");
    let o = run(&[
        "dataset",
        "ingest",
        "--layout",
        "det_fly",
        "--root",
        dir.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--tag",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("records=20 boxes=27 rejects=0"));
    out.to_str().unwrap().to_string()
}

#[test]
fn dataset_ingest_split_stats() {
    let dir = tempfile::tempdir().unwrap();
    let all = ingest_fixture(dir.path());
    let text = fs::read_to_string(&all).unwrap();
    assert!(text.starts_with("# dronedet annotations v1\n"));
    assert!(text.contains("\turban\t") && text.contains("\tcountryside\t"));

    let split_dir = dir.path().join("split");
    let out = ok(&["--seed", "3", "dataset", "split", "--input", &all, "--out-dir", split_dir.to_str().unwrap()]);
    assert!(out.starts_with("# dronedet split v1\n"));
    assert!(out.contains("total,20,18,2\n"));
    let val = fs::read_to_string(split_dir.join("val.tsv")).unwrap();
    assert_eq!(val.lines().count(), 3);
    ok(&["--seed", "3", "dataset", "split", "--input", &all, "--out-dir", split_dir.to_str().unwrap()]);
    assert_eq!(fs::read_to_string(split_dir.join("val.tsv")).unwrap(), val);

    let stats = ok(&["dataset", "stats", "--input", &all]);
    let lines: Vec<&str> = stats.lines().collect();
    assert_eq!(lines[0], "# dronedet dataset-stats v1");
    assert_eq!(lines[2], "det_fly,20,27,0,0,0,10,10,20,7,0");

    let o = run(&["dataset", "ingest", "--layout", "coco", "--root", dir.path().to_str().unwrap(), "--out", "-"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).contains("unknown layout"));
}

#[test]
fn match_reports_positives_for_every_box() {
    let dir = tempfile::tempdir().unwrap();
    let all = ingest_fixture(dir.path());
    let out = ok(&["match", "--annotations", &all]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "# dronedet match v1");
    let images: Vec<Vec<&str>> = lines.iter().filter(|l| l.starts_with("image,")).map(|l| l.split(',').collect()).collect();
    assert_eq!(images.len(), 20);
    for f in &images {
        assert!(f[5].parse::<usize>().unwrap() >= 1, "{f:?}");
    }
    assert_eq!(lines.iter().filter(|l| l.starts_with("scale,")).count(), 8);
    assert!(lines.last().unwrap().starts_with("total,,27,"));
}

#[test]
fn evaluate_perfect_and_shifted_detections() {
    let dir = tempfile::tempdir().unwrap();
    let all = ingest_fixture(dir.path());
    let records = fs::read_to_string(&all).unwrap();
    let mut det = String::from("# detections\n");
    for line in records.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        for b in f[8].split(';') {
            let c = b.trim_start_matches("drone:").replace(',', " ");
            det += &format!("{} {c} 0.9\n", f[0]);
        }
    }
    let det_path = dir.path().join("det.txt");
    fs::write(&det_path, &det).unwrap();
    let out_dir = dir.path().join("report");
    let out = ok(&["evaluate", "--gt", &all, "--det", det_path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.starts_with("# dronedet eval-summary v1\n"));
    for key in ["ap_5095=1\n", "ap_50=1\n", "ar_5095=1\n", "detections=27\n"] {
        assert!(out.contains(key), "{key} in {out}");
    }
    let csv = fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert!(csv.starts_with("# dronedet eval-report v1\n"));
    let svg = fs::read_to_string(out_dir.join("pr_curves.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 10);

    fs::write(&det_path, "img00 1 2 3\n").unwrap();
    let o = run(&["evaluate", "--gt", &all, "--det", det_path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("error: kind=parse"));
}

#[test]
fn augment_is_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let all = ingest_fixture(dir.path());
    let mut outputs = Vec::new();
    for (workers, name) in [("1", "a"), ("4", "b")] {
        let out = dir.path().join(name);
        let o = run_in(
            None,
            &["--seed", "9", "augment", "--annotations", &all, "--out", out.to_str().unwrap(), "--preview", "--repeats", "2", "--output-size", "32"],
            &[("DRONEDET_WORKERS", workers)],
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let mut files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        assert_eq!(files.len(), 40 + 2);
        outputs.push(files.iter().map(|p| (p.file_name().unwrap().to_owned(), fs::read(p).unwrap())).collect::<Vec<_>>());
    }
    assert_eq!(outputs[0], outputs[1]);
    let trace = String::from_utf8(outputs[0].iter().find(|(n, _)| n == "trace.csv").unwrap().1.clone()).unwrap();
    assert!(trace.starts_with("# dronedet augment-trace v1\n"));
    assert_eq!(trace.lines().count(), 2 + 40);
    let ppm = &outputs[0].iter().find(|(n, _)| n == "000000.ppm").unwrap().1;
    assert!(ppm.starts_with(b"P6\n32 32\n255\n"));
    let ann = String::from_utf8(outputs[0].iter().find(|(n, _)| n == "annotations.tsv").unwrap().1.clone()).unwrap();
    assert!(ann.starts_with("# dronedet annotations v1\n"));
    assert!(ann.contains("img00#1\t000001.ppm\t32\t32\t"));
}
