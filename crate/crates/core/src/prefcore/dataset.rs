//! Line-delimited preference dataset.
//!
//! ```text
//! #balanced-pref v1 d=<d> k=<K> metrics=<id,...> [config=<hash>] [seed=<n>]
//! pair_id,condition,x_a(d),x_b(d),scores_a(K),scores_b(K),votes(K or -),consensus(+1/-1/-),tie_broken(0/1/-)
//! ```
//!
//! Floats are written with the shortest representation that parses back to
//! the same `f64`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::prefcore::{
    metric_ids, Condition, ConsensusLabel, MetricIds, PreferencePair, Sample, ScoreVector,
    VoteVector,
};

const MAGIC: &str = "#balanced-pref";
const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub d: usize,
    pub metric_ids: MetricIds,
    /// Extra `key=value` provenance tokens (config hash, seed), in order.
    pub extra: Vec<(String, String)>,
}

impl DatasetHeader {
    pub fn new(d: usize, metric_ids: MetricIds) -> Self {
        DatasetHeader {
            d,
            metric_ids,
            extra: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.metric_ids.len()
    }

    pub fn with_extra(mut self, key: &str, value: impl ToString) -> Self {
        self.extra.push((key.to_string(), value.to_string()));
        self
    }

    fn from_pairs(pairs: &[PreferencePair]) -> Result<Self> {
        let Some(first) = pairs.first() else {
            return Ok(DatasetHeader::new(0, metric_ids::<&str>(&[])));
        };
        Ok(DatasetHeader::new(
            first.dim(),
            first.scores_a.metric_ids.clone(),
        ))
    }

    fn render(&self) -> String {
        let mut line = format!(
            "{MAGIC} {VERSION} d={} k={} metrics={}",
            self.d,
            self.k(),
            self.metric_ids.join(",")
        );
        for (k, v) in &self.extra {
            line.push_str(&format!(" {k}={v}"));
        }
        line
    }

    fn parse(line: &str, file: &str) -> Result<Self> {
        let err = |msg: String| Error::Parse {
            file: file.to_string(),
            line: 1,
            msg,
        };
        let mut tokens = line.split_whitespace();
        if tokens.next() != Some(MAGIC) {
            return Err(err(format!("missing `{MAGIC}` header")));
        }
        match tokens.next() {
            Some(VERSION) => {}
            other => return Err(err(format!("unsupported format version {other:?}"))),
        }
        let (mut d, mut k, mut metrics) = (None, None, None);
        let mut extra = Vec::new();
        for tok in tokens {
            let (key, value) = tok
                .split_once('=')
                .ok_or_else(|| err(format!("malformed header token `{tok}`")))?;
            match key {
                "d" => d = Some(value.parse::<usize>().map_err(|e| err(format!("d: {e}")))?),
                "k" => k = Some(value.parse::<usize>().map_err(|e| err(format!("k: {e}")))?),
                "metrics" => {
                    let ids: Vec<&str> = if value.is_empty() {
                        Vec::new()
                    } else {
                        value.split(',').collect()
                    };
                    metrics = Some(metric_ids(&ids));
                }
                _ => extra.push((key.to_string(), value.to_string())),
            }
        }
        let d = d.ok_or_else(|| err("header lacks d=".into()))?;
        let k = k.ok_or_else(|| err("header lacks k=".into()))?;
        let metric_ids = metrics.ok_or_else(|| err("header lacks metrics=".into()))?;
        if metric_ids.len() != k {
            return Err(err(format!(
                "header declares k={k} but lists {} metrics",
                metric_ids.len()
            )));
        }
        Ok(DatasetHeader {
            d,
            metric_ids,
            extra,
        })
    }
}

fn check_metric_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(',') || id.chars().any(char::is_whitespace) {
        return Err(Error::validation(format!(
            "metric id `{id}` must be nonempty without commas or whitespace"
        )));
    }
    Ok(())
}

/// Writes `pairs` with a header inferred from the first pair.
pub fn write_dataset(pairs: &[PreferencePair], path: &Path) -> Result<()> {
    let header = DatasetHeader::from_pairs(pairs)?;
    write_dataset_with_header(&header, pairs, path)
}

pub fn write_dataset_with_header(
    header: &DatasetHeader,
    pairs: &[PreferencePair],
    path: &Path,
) -> Result<()> {
    for id in header.metric_ids.iter() {
        check_metric_id(id)?;
    }
    for p in pairs {
        p.validate()?;
        if p.dim() != header.d || p.scores_a.metric_ids != header.metric_ids {
            return Err(Error::validation(format!(
                "pair {} disagrees with dataset d/K/metric ids",
                p.pair_id
            )));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", header.render()).map_err(io)?;
    for p in pairs {
        writeln!(out, "{}", render_record(p)).map_err(io)?;
    }
    out.flush().map_err(io)
}

fn render_record(p: &PreferencePair) -> String {
    let mut f: Vec<String> = Vec::with_capacity(4 + 2 * p.dim() + 3 * p.k() + 2);
    f.push(p.pair_id.to_string());
    f.push(p.condition.0.to_string());
    for v in p
        .sample_a
        .0
        .iter()
        .chain(&p.sample_b.0)
        .chain(&p.scores_a.values)
        .chain(&p.scores_b.values)
    {
        f.push(format!("{v:?}"));
    }
    match &p.votes {
        Some(v) => f.extend(v.0.iter().map(|x| x.to_string())),
        None => f.push("-".into()),
    }
    match p.consensus {
        Some(c) => {
            f.push(if c.s() > 0 { "+1" } else { "-1" }.into());
            f.push(if c.tie_broken { "1" } else { "0" }.into());
        }
        None => {
            f.push("-".into());
            f.push("-".into());
        }
    }
    f.join(",")
}

pub fn read_dataset(path: &Path) -> Result<Vec<PreferencePair>> {
    read_dataset_with_header(path).map(|(_, pairs)| pairs)
}

pub fn read_dataset_with_header(path: &Path) -> Result<(DatasetHeader, Vec<PreferencePair>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut lines = BufReader::new(file).lines();
    let first = match lines.next() {
        Some(line) => line.map_err(|e| Error::io(path, e))?,
        None => {
            return Err(Error::Parse {
                file: name,
                line: 1,
                msg: "empty file".into(),
            })
        }
    };
    let header = DatasetHeader::parse(&first, &name)?;
    let mut pairs = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let pair = parse_record(&line, &header).map_err(|msg| Error::Parse {
            file: name.clone(),
            line: lineno,
            msg,
        })?;
        pair.validate().map_err(|e| Error::Parse {
            file: name.clone(),
            line: lineno,
            msg: e.to_string(),
        })?;
        pairs.push(pair);
    }
    Ok((header, pairs))
}

fn parse_record(line: &str, h: &DatasetHeader) -> std::result::Result<PreferencePair, String> {
    let fields: Vec<&str> = line.split(',').collect();
    let (d, k) = (h.d, h.k());
    let base = 2 + 2 * d + 2 * k;
    let labeled_len = base + k + 2;
    let unvoted_len = base + 3;
    let voted = if fields.len() == labeled_len && (k != 1 || fields[base] != "-") {
        true
    } else if fields.len() == unvoted_len && fields[base] == "-" {
        false
    } else {
        return Err(format!(
            "expected {labeled_len} fields (or {unvoted_len} without votes) for d={d} k={k}, found {}",
            fields.len()
        ));
    };

    let pair_id = fields[0]
        .parse::<u64>()
        .map_err(|e| format!("pair_id `{}`: {e}", fields[0]))?;
    let condition = fields[1]
        .parse::<u32>()
        .map_err(|e| format!("condition `{}`: {e}", fields[1]))?;
    let floats = |range: std::ops::Range<usize>| -> std::result::Result<Vec<f64>, String> {
        fields[range]
            .iter()
            .map(|s| {
                let v = s.parse::<f64>().map_err(|e| format!("value `{s}`: {e}"))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(format!("value `{s}` is not finite"))
                }
            })
            .collect()
    };
    let mut at = 2;
    let x_a = floats(at..at + d)?;
    at += d;
    let x_b = floats(at..at + d)?;
    at += d;
    let s_a = floats(at..at + k)?;
    at += k;
    let s_b = floats(at..at + k)?;
    at += k;

    let votes = if voted {
        let v = fields[at..at + k]
            .iter()
            .map(|s| match *s {
                "1" | "+1" => Ok(1i8),
                "0" => Ok(0),
                "-1" => Ok(-1),
                other => Err(format!("vote `{other}` not in {{-1,0,+1}}")),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        at += k;
        Some(VoteVector(v))
    } else {
        at += 1;
        None
    };
    let consensus = match (fields[at], fields[at + 1]) {
        ("-", "-") => None,
        (s, t) => {
            let s = match s {
                "+1" | "1" => 1,
                "-1" => -1,
                other => return Err(format!("consensus `{other}` not in {{+1,-1,-}}")),
            };
            let tie_broken = match t {
                "0" => false,
                "1" => true,
                other => return Err(format!("tie_broken `{other}` not in {{0,1}}")),
            };
            Some(ConsensusLabel::new(s, tie_broken).map_err(|e| e.to_string())?)
        }
    };

    Ok(PreferencePair {
        pair_id,
        condition: Condition(condition),
        sample_a: Sample(x_a),
        sample_b: Sample(x_b),
        scores_a: ScoreVector {
            values: s_a,
            metric_ids: h.metric_ids.clone(),
        },
        scores_b: ScoreVector {
            values: s_b,
            metric_ids: h.metric_ids.clone(),
        },
        votes,
        consensus,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn ids() -> MetricIds {
        metric_ids(&["m1", "m2", "m3", "m4"])
    }

    fn pair(id: u64) -> PreferencePair {
        PreferencePair::unlabeled(
            id,
            Condition(2),
            Sample(vec![0.1, -1e-300]),
            Sample(vec![1.0 / 3.0, 2.5e17]),
            ScoreVector::new(vec![1.0, -0.0, 3.25, 1e-7], ids()).unwrap(),
            ScoreVector::new(vec![0.5, 2.0, -3.0, 7.0], ids()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.pref");
        write_dataset(&[], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(read_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn single_pair_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.pref");
        let p = pair(0);
        write_dataset(std::slice::from_ref(&p), &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 2);
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, vec![p.clone()]);
        for (x, y) in back[0].sample_a.0.iter().zip(&p.sample_a.0) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(back[0].scores_a.values[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn votes_without_consensus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.pref");
        let mut p = pair(3);
        p.votes = Some(VoteVector(vec![1, 0, -1, 1]));
        write_dataset(std::slice::from_ref(&p), &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back[0].votes, p.votes);
        assert!(back[0].consensus.is_none());
    }

    #[test]
    fn short_score_vector_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pref");
        write_dataset(&[pair(0), pair(1)], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        // drop one value of scores_a on the third line
        let mut fields: Vec<&str> = lines[2].split(',').collect();
        fields.remove(2 + 4);
        lines[2] = fields.join(",");
        fs::write(&path, lines.join("\n")).unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn header_is_authoritative() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.pref");
        write_dataset(&[pair(0)], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("d=2", "d=3");
        fs::write(&path, text).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn heterogeneous_pairs_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut q = pair(9);
        q.sample_a.0.push(0.0);
        q.sample_b.0.push(0.0);
        let err = write_dataset(&[pair(0), q], &dir.path().join("x.pref")).unwrap_err();
        assert!(err.to_string().contains("pair 9"), "{err}");
    }

    #[test]
    fn provenance_tokens_survive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pref");
        let header = DatasetHeader::new(2, ids())
            .with_extra("config", "abc123")
            .with_extra("seed", 5);
        write_dataset_with_header(&header, &[pair(0)], &path).unwrap();
        let (h, _) = read_dataset_with_header(&path).unwrap();
        assert_eq!(h, header);
    }
}
