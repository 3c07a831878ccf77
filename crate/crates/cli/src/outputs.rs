//! All-or-nothing output staging: every artifact of a command is rendered in
//! memory first, then persisted by atomic rename. If any write fails, the
//! files already persisted by this command are removed again.

use std::path::{Path, PathBuf};

use mood_core::datamodel::{atomic_write, RunManifest};
use mood_core::{MoodError, Result};

#[derive(Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: &Path, bytes: Vec<u8>) {
        self.files.push((path.to_path_buf(), bytes));
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.files.iter().map(|(p, _)| p.clone()).collect()
    }

    /// Adds `manifest` (listing every staged output) next to `primary`.
    /// Fails if any output would overwrite one of the manifest's inputs.
    pub fn add_manifest(&mut self, primary: &Path, mut manifest: RunManifest) -> Result<()> {
        manifest.outputs = self.paths();
        self.add(&manifest_path(primary), Vec::new());
        for (out, _) in &self.files {
            if let Some(inp) = manifest.inputs.iter().find(|i| same_file(i, out)) {
                return Err(MoodError::Config(format!(
                    "output {} would overwrite input {}",
                    out.display(),
                    inp.display()
                )));
            }
        }
        self.files.last_mut().expect("just added").1 = manifest.to_json().into_bytes();
        Ok(())
    }

    pub fn commit(self) -> Result<()> {
        for (p, _) in &self.files {
            check_parent(p)?;
        }
        let mut done: Vec<&Path> = Vec::new();
        for (p, bytes) in &self.files {
            if let Err(e) = atomic_write(p, bytes) {
                for q in done {
                    let _ = std::fs::remove_file(q);
                }
                return Err(e);
            }
            done.push(p);
        }
        Ok(())
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn check_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(MoodError::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        )),
        _ => Ok(()),
    }
}

/// `<out>.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_directory_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("a.txt");
        let bad = dir.path().join("nope").join("b.txt");
        let mut o = Outputs::default();
        o.add(&good, b"x".to_vec());
        o.add(&bad, b"y".to_vec());
        assert!(o.commit().is_err());
        assert!(!good.exists());
    }

    #[test]
    fn refuses_to_overwrite_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.csv");
        std::fs::write(&input, "x").unwrap();
        let mut m = RunManifest::new(mood_core::datamodel::Stage::Eval, "d", None).unwrap();
        m.inputs = vec![input.clone()];
        let mut o = Outputs::default();
        o.add(&dir.path().join(".").join("in.csv"), b"y".to_vec());
        assert!(matches!(o.add_manifest(&input, m), Err(MoodError::Config(_))));
    }

    #[test]
    fn manifest_name() {
        assert_eq!(manifest_path(Path::new("out/m.ck")), PathBuf::from("out/m.ck.manifest.json"));
    }
}
