//! Acceptance suite. Each test covers one criterion and prints a single
//! `A<n> PASS|FAIL` line (plus indented details) straight to stdout, so the
//! verdicts show up even when libtest captures output.
//!
//! The benchmark criteria share one pretrained checkpoint, cached under the
//! cargo target directory and reused while its training config matches.

mod benchmark;
mod determinism;
mod math;
mod selection;
mod updates;

use std::io::Write;

/// Collects the checks of one criterion.
pub struct Verdict {
    id: &'static str,
    title: &'static str,
    lines: Vec<String>,
    failed: usize,
}

impl Verdict {
    pub fn new(id: &'static str, title: &'static str) -> Self {
        Self {
            id,
            title,
            lines: Vec::new(),
            failed: 0,
        }
    }

    pub fn check(&mut self, ok: bool, what: impl AsRef<str>) -> bool {
        if !ok {
            self.failed += 1;
        }
        self.lines.push(format!("    {}  {}", if ok { "ok " } else { "BAD" }, what.as_ref()));
        ok
    }

    /// Prints the verdict and panics when any check failed.
    pub fn finish(self) {
        let status = if self.failed == 0 { "PASS" } else { "FAIL" };
        let mut out = format!("\n{} {status}  {}\n", self.id, self.title);
        for l in &self.lines {
            out += l;
            out.push('\n');
        }
        let stdout = std::io::stdout();
        let mut lock = stdout.lock();
        lock.write_all(out.as_bytes()).unwrap();
        lock.flush().unwrap();
        drop(lock);
        assert_eq!(self.failed, 0, "{} failed {} check(s)", self.id, self.failed);
    }
}

/// Dice points with two decimals.
pub fn pts(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}
