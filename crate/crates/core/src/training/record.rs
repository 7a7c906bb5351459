//! Run records and their line-oriented text form.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

impl StopReason {
    fn as_str(self) -> &'static str {
        match self {
            StopReason::Patience => "patience",
            StopReason::MaxEpochs => "max_epochs",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub version: String,
    pub seed: u64,
    pub parameters: usize,
    /// Training NLL of the untrained model on the first epoch's windows.
    pub initial_train_nll: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub stop_reason: StopReason,
    /// Batches whose gradients were rescaled.
    pub clip_events: usize,
    pub checkpoint: Option<String>,
    /// Effective configuration, echoed verbatim.
    pub config: String,
}

const MAGIC: &str = "bitcn-run-record 1";

impl RunRecord {
    pub fn stopped_epoch(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch)
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_nll).collect()
    }

    /// Copy with wall-clock timings zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for e in &mut r.epochs {
            e.seconds = 0.0;
        }
        r
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC}\nversion {}\nseed {}\nparameters {}\n", self.version, self.seed, self.parameters);
        s += &format!("initial_train_nll {}\n", self.initial_train_nll);
        s += "# epoch train_nll val_nll seconds\n";
        for e in &self.epochs {
            s += &format!("epoch {} {} {} {}\n", e.epoch, e.train_nll, e.val_nll, e.seconds);
        }
        s += &format!("best_epoch {}\nbest_val_nll {}\n", self.best_epoch, self.best_val_nll);
        s += &format!("stopped_epoch {}\nstop_reason {}\n", self.stopped_epoch(), self.stop_reason.as_str());
        s += &format!("clip_events {}\n", self.clip_events);
        s += &format!("checkpoint {}\n", self.checkpoint.as_deref().unwrap_or("-"));
        s += "config\n";
        s += &self.config;
        if !self.config.is_empty() && !self.config.ends_with('\n') {
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line: usize, m: &str| Error::Parse {
            line,
            message: m.to_string(),
        };
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(err(1, "not a run record")),
        }
        let mut r = RunRecord {
            version: String::new(),
            seed: 0,
            parameters: 0,
            initial_train_nll: f64::NAN,
            epochs: Vec::new(),
            best_epoch: 0,
            best_val_nll: f64::NAN,
            stop_reason: StopReason::MaxEpochs,
            clip_events: 0,
            checkpoint: None,
            config: String::new(),
        };
        fn num<T: std::str::FromStr>(v: &str, line: usize) -> Result<T> {
            v.parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad number `{v}`"),
            })
        }
        for (n, line) in lines.by_ref() {
            if line.starts_with('#') {
                continue;
            }
            if line == "config" {
                break;
            }
            let (key, value) = line.split_once(' ').ok_or_else(|| err(n, "expected `key value`"))?;
            match key {
                "version" => r.version = value.to_string(),
                "seed" => r.seed = num(value, n)?,
                "parameters" => r.parameters = num(value, n)?,
                "initial_train_nll" => r.initial_train_nll = num(value, n)?,
                "epoch" => {
                    let f: Vec<&str> = value.split(' ').collect();
                    if f.len() != 4 {
                        return Err(err(n, "epoch line needs 4 fields"));
                    }
                    r.epochs.push(EpochRecord {
                        epoch: num(f[0], n)?,
                        train_nll: num(f[1], n)?,
                        val_nll: num(f[2], n)?,
                        seconds: num(f[3], n)?,
                    });
                }
                "best_epoch" => r.best_epoch = num(value, n)?,
                "best_val_nll" => r.best_val_nll = num(value, n)?,
                "stopped_epoch" => {
                    if num::<usize>(value, n)? != r.stopped_epoch() {
                        return Err(err(n, "stopped_epoch disagrees with epoch lines"));
                    }
                }
                "stop_reason" => {
                    r.stop_reason = match value {
                        "patience" => StopReason::Patience,
                        "max_epochs" => StopReason::MaxEpochs,
                        _ => return Err(err(n, "unknown stop reason")),
                    }
                }
                "clip_events" => r.clip_events = num(value, n)?,
                "checkpoint" => r.checkpoint = (value != "-").then(|| value.to_string()),
                _ => return Err(err(n, &format!("unknown key `{key}`"))),
            }
        }
        for (_, line) in lines {
            r.config.push_str(line);
            r.config.push('\n');
        }
        Ok(r)
    }
}
