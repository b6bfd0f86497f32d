use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use gamelab_core::Verdict;
use serde::{Deserialize, Serialize};

pub const VERDICT_SUFFIX: &str = ".verdict.json";
const SWEEP_HEADER: &str = "parameter,label,statistic,mean,stderr,n";

/// Write through a sibling temp file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Machine-readable outcome of one command run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictBlock {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub pass: bool,
    pub verdicts: Vec<Verdict>,
    /// Files written next to the block, relative to the output directory.
    pub artifacts: Vec<String>,
}

impl VerdictBlock {
    pub fn new(command: &str, config_hash: &str, seed: u64, verdicts: Vec<Verdict>, artifacts: Vec<String>) -> Self {
        let pass = verdicts.iter().all(|v| v.pass);
        Self { command: command.into(), config_hash: config_hash.into(), seed, pass, verdicts, artifacts }
    }

    pub fn write(&self, out: &Path) -> anyhow::Result<PathBuf> {
        let path = out.join(format!("{}{VERDICT_SUFFIX}", self.command));
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub source: String,
    pub name: String,
    pub detail: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub file: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub pass: bool,
    pub n_verdicts: usize,
}

/// Merged view of every verdict block in a directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consolidated {
    pub n_blocks: usize,
    pub n_pass: usize,
    pub n_fail: usize,
    pub blocks: Vec<BlockSummary>,
    pub failures: Vec<Failure>,
}

impl Consolidated {
    pub fn pass(&self) -> bool {
        self.n_fail == 0
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{} verdicts: {} pass, {} fail\n", self.n_pass + self.n_fail, self.n_pass, self.n_fail);
        for b in &self.blocks {
            s.push_str(&format!("  {} {} ({} verdicts)\n", if b.pass { "ok  " } else { "FAIL" }, b.file, b.n_verdicts));
        }
        for f in &self.failures {
            s.push_str(&format!("  failed {}::{}: {}", f.source, f.name, f.detail));
            if !f.metrics.is_empty() {
                let m: Vec<String> = f.metrics.iter().map(|(k, v)| format!("{k}={v}")).collect();
                s.push_str(&format!(" [{}]", m.join(", ")));
            }
            s.push('\n');
        }
        s
    }
}

fn first_line(path: &Path) -> anyhow::Result<String> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().next().unwrap_or_default().to_string())
}

fn preamble_hash(line: &str) -> Option<&str> {
    line.strip_prefix("# config_hash=")?.split(',').next()
}

/// Merge the verdict blocks in `dir`, check artifact hashes, and write
/// `report.json` plus the long-format `report.csv`.
pub fn report(dir: &Path) -> anyhow::Result<Consolidated> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(VERDICT_SUFFIX)))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no verdict blocks (*{VERDICT_SUFFIX}) in {}", dir.display());
    }
    let mut blocks = Vec::new();
    let mut failures = Vec::new();
    let (mut n_pass, mut n_fail) = (0, 0);
    let mut csv = String::from("source,parameter,statistic,mean,stderr\n");
    for path in &files {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let text = fs::read_to_string(path)?;
        let block: VerdictBlock =
            serde_json::from_str(&text).with_context(|| format!("parsing verdict block {name}"))?;
        let mut pass = block.pass;
        for v in &block.verdicts {
            if v.pass {
                n_pass += 1;
            } else {
                n_fail += 1;
                failures.push(Failure {
                    source: name.clone(),
                    name: v.name.clone(),
                    detail: v.detail.clone(),
                    metrics: v.metrics.clone(),
                });
            }
        }
        for art in &block.artifacts {
            let art_path = dir.join(art);
            if !art.ends_with(".csv") {
                continue;
            }
            let head = match first_line(&art_path) {
                Ok(h) => h,
                Err(e) => {
                    n_fail += 1;
                    pass = false;
                    failures.push(Failure {
                        source: name.clone(),
                        name: "artifact_missing".into(),
                        detail: format!("{art}: {e}"),
                        metrics: BTreeMap::new(),
                    });
                    continue;
                }
            };
            if preamble_hash(&head) != Some(block.config_hash.as_str()) {
                n_fail += 1;
                pass = false;
                failures.push(Failure {
                    source: name.clone(),
                    name: "hash_mismatch".into(),
                    detail: format!("{art} does not carry config hash {}", block.config_hash),
                    metrics: BTreeMap::new(),
                });
                continue;
            }
            append_long_rows(&art_path, art, &mut csv)?;
        }
        blocks.push(BlockSummary {
            file: name,
            command: block.command,
            config_hash: block.config_hash,
            seed: block.seed,
            pass,
            n_verdicts: block.verdicts.len(),
        });
    }
    let merged = Consolidated { n_blocks: blocks.len(), n_pass, n_fail, blocks, failures };
    let mut json = serde_json::to_vec_pretty(&merged)?;
    json.push(b'\n');
    write_atomic(&dir.join("report.json"), &json)?;
    write_atomic(&dir.join("report.csv"), csv.as_bytes())?;
    Ok(merged)
}

/// Copy the rows of a sweep CSV into the long-format report.
fn append_long_rows(path: &Path, source: &str, out: &mut String) -> anyhow::Result<()> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some(SWEEP_HEADER) {
        return Ok(());
    }
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            bail!("{source}: malformed sweep row `{line}`");
        }
        out.push_str(&format!("{source},{},{},{},{}\n", cols[0], cols[2], cols[3], cols[4]));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(dir: &Path, command: &str, pass: bool) {
        let v = Verdict::new("check", pass, "detail".into(), &[("x", 1.0)]);
        let csv = format!("{command}.csv");
        fs::write(dir.join(&csv), format!("# config_hash=abc,seed=1\n{SWEEP_HEADER}\n0.5,g,mean,1,0.1,10\n")).unwrap();
        VerdictBlock::new(command, "abc", 1, vec![v], vec![csv]).write(dir).unwrap();
    }

    #[test]
    fn single_pass() {
        let dir = tempfile::tempdir().unwrap();
        block(dir.path(), "a", true);
        let r = report(dir.path()).unwrap();
        assert_eq!((r.n_pass, r.n_fail), (1, 0));
        let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv, "source,parameter,statistic,mean,stderr\na.csv,0.5,mean,1,0.1\n");
    }

    #[test]
    fn mixed_lists_failures() {
        let dir = tempfile::tempdir().unwrap();
        block(dir.path(), "a", true);
        block(dir.path(), "b", false);
        let r = report(dir.path()).unwrap();
        assert!(!r.pass());
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].source, "b.verdict.json");
        assert!(r.summary().contains("failed b.verdict.json::check"));
    }

    #[test]
    fn hash_mismatch_fails() {
        let dir = tempfile::tempdir().unwrap();
        block(dir.path(), "a", true);
        fs::write(dir.path().join("a.csv"), format!("# config_hash=zzz,seed=1\n{SWEEP_HEADER}\n")).unwrap();
        let r = report(dir.path()).unwrap();
        assert_eq!(r.failures[0].name, "hash_mismatch");
    }

    #[test]
    fn empty_directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(report(dir.path()).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        write_atomic(&dir.path().join("sub/x.txt"), b"hi").unwrap();
        let names: Vec<_> = fs::read_dir(dir.path().join("sub")).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("x.txt")]);
    }
}
