//! Text checkpoint: one header line, then one parameter per line in the
//! flat layout of [`DenoiserParams`].
//!
//! ```text
//! #balanced-ckpt v1 d=<d> m=<m> c=<C> h=<h> t=<T> n=<count> [key=value ...]
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::diffusion::{Arch, DenoiserParams};
use crate::error::{Error, Result};
use crate::fsio::write_atomic;

const MAGIC: &str = "#balanced-ckpt";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    /// Number of diffusion steps the model was trained with.
    pub steps: usize,
    pub extra: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(params: DenoiserParams, steps: usize) -> Self {
        Checkpoint {
            params,
            steps,
            extra: Vec::new(),
        }
    }

    pub fn with_extra(mut self, key: &str, value: impl ToString) -> Self {
        self.extra.push((key.to_string(), value.to_string()));
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let a = self.params.arch;
        let mut header = format!(
            "{MAGIC} v1 d={} m={} c={} h={} t={} n={}",
            a.d,
            a.m,
            a.c,
            a.h,
            self.steps,
            self.params.len()
        );
        for (k, v) in &self.extra {
            header.push_str(&format!(" {k}={v}"));
        }
        write_atomic(path, |out: &mut dyn Write| {
            writeln!(out, "{header}")?;
            for v in &self.params.values {
                writeln!(out, "{v:?}")?;
            }
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file = path.display().to_string();
        let err = |line: usize, msg: String| Error::Parse {
            file: file.clone(),
            line,
            msg,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "empty checkpoint".into()))?;
        let mut tokens = header.split_whitespace();
        if tokens.next() != Some(MAGIC) || tokens.next() != Some("v1") {
            return Err(err(1, "not a v1 checkpoint".into()));
        }
        let mut fields = [None::<usize>; 6];
        let names = ["d", "m", "c", "h", "t", "n"];
        let mut extra = Vec::new();
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| err(1, format!("malformed token `{tok}`")))?;
            match names.iter().position(|n| *n == k) {
                Some(i) => {
                    fields[i] = Some(v.parse().map_err(|e| err(1, format!("{k}: {e}")))?)
                }
                None => extra.push((k.to_string(), v.to_string())),
            }
        }
        let get = |i: usize| fields[i].ok_or_else(|| err(1, format!("header lacks {}=", names[i])));
        let arch = Arch {
            d: get(0)?,
            m: get(1)?,
            c: get(2)?,
            h: get(3)?,
        };
        let steps = get(4)?;
        let n = get(5)?;
        if n != arch.n_params() {
            return Err(err(1, format!("n={n} but architecture has {} parameters", arch.n_params())));
        }
        let values = lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|e| err(i + 2, format!("`{l}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != n {
            return Err(err(1, format!("header declares {n} parameters, file has {}", values.len())));
        }
        let params = DenoiserParams::from_values(arch, values).map_err(|e| err(1, e.to_string()))?;
        Ok(Checkpoint { params, steps, extra })
    }
}
