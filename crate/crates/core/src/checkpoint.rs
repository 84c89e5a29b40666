//! Versioned text checkpoints. Floats are stored as the hex of their bit
//! pattern so a save/load round trip is exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::cluster::Partition;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::io::{read_utf8, write_atomic};
use crate::model::{Dcvae, LatentMode, LatentSetup, ModelDims};
use crate::tensor::Tensor;

const MAGIC: &str = "dcvae-checkpoint";
const VERSION: u32 = 1;

/// A trained model together with the vocabulary it was built on.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub vocab: Vocab,
    pub model: Dcvae,
}

fn hex(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

impl Checkpoint {
    pub fn new(vocab: Vocab, model: Dcvae) -> Result<Self> {
        if vocab.len() != model.dims().vocab {
            return Err(Error::invalid(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                model.dims().vocab
            )));
        }
        Ok(Self { vocab, model })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let d = self.model.dims();
        writeln!(out, "{MAGIC} {VERSION}").unwrap();
        writeln!(out, "mode {}", self.model.mode()).unwrap();
        writeln!(
            out,
            "dims {} {} {} {} {} {}",
            d.vocab,
            d.d_word,
            d.d_hidden,
            d.d_cluster,
            d.d_scorer,
            hex(d.init_scale)
        )
        .unwrap();
        match self.model.setup() {
            LatentSetup::TwoStage { ids, partition } => {
                writeln!(out, "latent {}", join_ids(ids)).unwrap();
                writeln!(out, "clusters {}", partition.k()).unwrap();
                for m in partition.all_members() {
                    writeln!(out, "{}", join_ids(m)).unwrap();
                }
            }
            LatentSetup::OneStage { ids } => writeln!(out, "latent {}", join_ids(ids)).unwrap(),
            LatentSetup::Cd { m } => writeln!(out, "abstract {m}").unwrap(),
            LatentSetup::NoLatent => {}
        }
        let vocab = self.vocab.to_text();
        writeln!(out, "vocab {}", vocab.lines().count()).unwrap();
        out.push_str(&vocab);
        let store = self.model.store();
        writeln!(out, "params {}", store.len()).unwrap();
        for id in store.ids() {
            let t = store.get(id);
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            write!(out, "{} {}", store.name(id), shape.join("x")).unwrap();
            for &x in t.data() {
                write!(out, " {}", hex(x)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_utf8(path)?, path)
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("truncated checkpoint: missing {what}")))
        };
        let perr = |n: usize, m: String| Error::parse(path, n + 1, m);

        let (n, header) = next("header")?;
        if header != format!("{MAGIC} {VERSION}") {
            return Err(perr(n, format!("not a version {VERSION} checkpoint: `{header}`")));
        }
        let (n, line) = next("mode")?;
        let mode: LatentMode = line
            .strip_prefix("mode ")
            .ok_or_else(|| perr(n, "expected `mode <name>`".into()))?
            .parse()
            .map_err(|e: Error| perr(n, e.to_string()))?;

        let (n, line) = next("dims")?;
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 7 || f[0] != "dims" {
            return Err(perr(n, "expected `dims` followed by 6 values".into()));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| perr(n, format!("bad dimension `{s}`: {e}")));
        let init_bits = u64::from_str_radix(f[6], 16).map_err(|e| perr(n, format!("bad init scale: {e}")))?;
        let dims = ModelDims {
            vocab: num(f[1])?,
            d_word: num(f[2])?,
            d_hidden: num(f[3])?,
            d_cluster: num(f[4])?,
            d_scorer: num(f[5])?,
            init_scale: f64::from_bits(init_bits),
        };

        let parse_ids = |n: usize, s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| t.parse().map_err(|e| perr(n, format!("bad id `{t}`: {e}"))))
                .collect()
        };
        let mut latent_line = || -> Result<Vec<usize>> {
            let (n, line) = next("latent ids")?;
            let rest = line
                .strip_prefix("latent")
                .ok_or_else(|| perr(n, "expected `latent <ids>`".into()))?;
            parse_ids(n, rest)
        };
        let setup = match mode {
            LatentMode::TwoStage => {
                let ids = latent_line()?;
                let (n, line) = next("cluster count")?;
                let k: usize = line
                    .strip_prefix("clusters ")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| perr(n, "expected `clusters <k>`".into()))?;
                let mut assignment = Vec::new();
                for c in 0..k {
                    let (n, line) = next("cluster members")?;
                    assignment.extend(parse_ids(n, line)?.into_iter().map(|z| (z, c)));
                }
                let partition = Partition::from_assignment(&assignment)
                    .map_err(|e| Error::parse(path, 0, format!("bad partition: {e}")))?;
                LatentSetup::TwoStage { ids, partition }
            }
            LatentMode::OneStage => LatentSetup::OneStage { ids: latent_line()? },
            LatentMode::CdVariant => {
                let (n, line) = next("abstract count")?;
                let m = line
                    .strip_prefix("abstract ")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| perr(n, "expected `abstract <m>`".into()))?;
                LatentSetup::Cd { m }
            }
            LatentMode::NoLatent => LatentSetup::NoLatent,
        };

        let (n, line) = next("vocab")?;
        let count: usize = line
            .strip_prefix("vocab ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| perr(n, "expected `vocab <count>`".into()))?;
        let mut vocab_text = String::new();
        for _ in 0..count {
            let (_, line) = next("vocab entry")?;
            vocab_text.push_str(line);
            vocab_text.push('\n');
        }
        let vocab = Vocab::from_text(&vocab_text, path)?;

        let mut model = Dcvae::new(dims, setup, 0)?;
        let (n, line) = next("params")?;
        let count: usize = line
            .strip_prefix("params ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| perr(n, "expected `params <count>`".into()))?;
        if count != model.store().len() {
            return Err(perr(n, format!("{count} parameters, model layout has {}", model.store().len())));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let (n, line) = next("parameter")?;
            let mut f = line.split(' ');
            let name = f.next().unwrap_or_default();
            let id = model
                .store()
                .id(name)
                .ok_or_else(|| perr(n, format!("unknown parameter `{name}`")))?;
            if std::mem::replace(&mut seen[id.0], true) {
                return Err(perr(n, format!("parameter `{name}` appears twice")));
            }
            let shape: Vec<usize> = f
                .next()
                .unwrap_or_default()
                .split('x')
                .map(|s| s.parse().map_err(|e| perr(n, format!("bad shape: {e}"))))
                .collect::<Result<_>>()?;
            let data: Vec<f64> = f
                .map(|s| {
                    u64::from_str_radix(s, 16)
                        .map(f64::from_bits)
                        .map_err(|e| perr(n, format!("bad value `{s}`: {e}")))
                })
                .collect::<Result<_>>()?;
            let t = Tensor::new(shape, data).map_err(|e| perr(n, e.to_string()))?;
            model.store_mut().set(id, t).map_err(|e| perr(n, e.to_string()))?;
        }
        if let Some((n, _)) = lines.peek() {
            return Err(perr(*n, "trailing data after the last parameter".into()));
        }
        Self::new(vocab, model)
    }
}
