use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::Scenario;
use crate::error::Result;

pub const MANIFEST: &str = "manifest.json";

/// SHA-256 over `blob <len>\0<bytes>`, the object hash git uses in its
/// SHA-256 repository format.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// An output directory that remembers what was written into it.
#[derive(Debug)]
pub struct OutDir {
    root: PathBuf,
    files: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    scenario: &'a Scenario,
    outputs: BTreeMap<String, String>,
}

impl OutDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(OutDir { root, files: Vec::new() })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn file(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.root.join(name))?))
    }

    pub fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let mut f = self.file(name)?;
        f.write_all(text.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| crate::Error::Format(e.to_string()))?;
        s.push('\n');
        self.text(name, &s)
    }

    pub fn child(&self, name: &str) -> Result<OutDir> {
        OutDir::create(self.root.join(name))
    }

    /// Lists a finished subdirectory's files, manifest included, in this one.
    pub fn adopt(&mut self, name: &str, child: &OutDir) {
        for f in child.files.iter().map(String::as_str).chain([MANIFEST]) {
            self.files.push(format!("{name}/{f}"));
        }
    }

    /// Writes `manifest.json` with the scenario and the hash of every output.
    pub fn finish(&mut self, command: &str, scenario: &Scenario) -> Result<()> {
        let mut outputs = BTreeMap::new();
        for name in &self.files {
            let bytes = fs::read(self.root.join(name))?;
            outputs.insert(name.clone(), blob_hash(&bytes));
        }
        let manifest = Manifest { command, scenario, outputs };
        let mut s = serde_json::to_string_pretty(&manifest).map_err(|e| crate::Error::Format(e.to_string()))?;
        s.push('\n');
        fs::write(self.root.join(MANIFEST), s)?;
        Ok(())
    }
}

pub(crate) fn trajectory_plot(csv: &str, title: &str) -> String {
    format!(
        "set datafile separator ','\n\
         set key autotitle columnhead\n\
         set title '{title}'\n\
         set xlabel 't [s]'\n\
         set ylabel 'e_p'\n\
         plot '{csv}' using 1:2 with lines\n"
    )
}

pub(crate) fn slice_plot(csv: &str, xlabel: &str, ylabel: &str, title: &str) -> String {
    format!(
        "set datafile separator ','\n\
         set title '{title}'\n\
         set xlabel '{xlabel}'\n\
         set ylabel '{ylabel}'\n\
         set view map\n\
         splot '{csv}' every ::1 using 1:2:3 with points palette pointtype 5 notitle\n"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_of_empty_object() {
        // `git hash-object --object-format=sha256 /dev/null`
        assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    #[test]
    fn manifest_lists_children() {
        let tmp = tempfile::tempdir().unwrap();
        let sc = Scenario::default();
        let mut top = OutDir::create(tmp.path()).unwrap();
        let mut sub = top.child("solve").unwrap();
        sub.text("a.csv", "x\n1\n").unwrap();
        sub.finish("solve", &sc).unwrap();
        top.adopt("solve", &sub);
        top.text("criteria.txt", "PASS\n").unwrap();
        top.finish("repro", &sc).unwrap();
        let m: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join(MANIFEST)).unwrap()).unwrap();
        let outputs = m["outputs"].as_object().unwrap();
        let keys: Vec<_> = outputs.keys().cloned().collect();
        assert_eq!(keys, ["criteria.txt", "solve/a.csv", "solve/manifest.json"]);
        assert_eq!(outputs["solve/a.csv"], blob_hash(b"x\n1\n"));
        assert_eq!(m["scenario"]["name"], "custom");
    }
}
