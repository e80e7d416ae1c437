use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use dronedet::datasetio::{read_canonical, AnnotationRecord, Reject};

use crate::Failure;

/// Buffered writer to `path`, or stdout for `None` and `-`.
pub fn create(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    match path {
        Some(p) if p.as_os_str() != "-" => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        _ => Ok(Box::new(BufWriter::new(std::io::stdout().lock()))),
    }
}

pub fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::new("input", format!("{} is not a readable file", path.display())))
    }
}

pub fn require_dir(path: &Path) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::new("input", format!("{} is not a directory", path.display())))
    }
}

pub fn warn_rejects(rejects: &[Reject]) {
    for r in rejects {
        let line = r.line.map_or(String::new(), |l| format!(":{l}"));
        eprintln!("warning: {}{line} {} {}", r.file, r.action.name(), r.reason);
    }
}

/// Canonical annotations; rejected lines are reported on stderr.
pub fn read_records(path: &Path) -> anyhow::Result<Vec<AnnotationRecord>> {
    require_file(path)?;
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let out = read_canonical(BufReader::new(f), &path.display().to_string())
        .with_context(|| format!("reading {}", path.display()))?;
    warn_rejects(&out.rejects);
    Ok(out.records)
}
