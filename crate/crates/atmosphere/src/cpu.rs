//! Per-thread CPU usage from `/proc/<pid>/task/<tid>/stat`.

use std::time::{Duration, Instant};

use crate::runtime::CpuSample;

struct Watched {
    node: String,
    path: String,
    last_ticks: Option<u64>,
}

pub struct CpuSampler {
    interval: Duration,
    ticks_per_s: f64,
    watched: Vec<Watched>,
    last: Option<Instant>,
    samples: Vec<CpuSample>,
}

/// utime + stime in clock ticks, fields 14 and 15 of a stat line.
pub fn parse_stat(line: &str) -> Option<u64> {
    // The command name may contain spaces; fields resume after its ')'.
    let rest = &line[line.rfind(')')? + 1..];
    let f: Vec<&str> = rest.split_whitespace().collect();
    // rest starts at field 3 (state).
    let utime: u64 = f.get(11)?.parse().ok()?;
    let stime: u64 = f.get(12)?.parse().ok()?;
    Some(utime + stime)
}

fn read_ticks(path: &str) -> Option<u64> {
    parse_stat(&std::fs::read_to_string(path).ok()?)
}

fn clock_ticks() -> f64 {
    // SAFETY: sysconf has no preconditions.
    let t = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if t > 0 {
        t as f64
    } else {
        100.0
    }
}

impl CpuSampler {
    pub fn new(interval: Duration) -> Self {
        CpuSampler {
            interval,
            ticks_per_s: clock_ticks(),
            watched: Vec::new(),
            last: None,
            samples: Vec::new(),
        }
    }

    pub fn watch(&mut self, node: String, path: String) {
        let last_ticks = read_ticks(&path);
        self.watched.push(Watched { node, path, last_ticks });
        self.last = Some(Instant::now());
    }

    /// Takes a sample if an interval has passed since the previous one.
    pub fn sample(&mut self, t_ms: u64) {
        let Some(last) = self.last else { return };
        let dt = last.elapsed();
        if dt < self.interval {
            return;
        }
        self.last = Some(Instant::now());
        for w in &mut self.watched {
            let Some(now) = read_ticks(&w.path) else { continue };
            if let Some(prev) = w.last_ticks {
                let used_s = now.saturating_sub(prev) as f64 / self.ticks_per_s;
                self.samples.push(CpuSample {
                    t_ms,
                    node: w.node.clone(),
                    cpu_pct: 100.0 * used_s / dt.as_secs_f64(),
                });
            }
            w.last_ticks = Some(now);
        }
    }

    pub fn finish(self) -> Vec<CpuSample> {
        self.samples
    }
}
