//! Trained-model files: a TIDB container of kind `Checkpoint` holding the run
//! configuration, named parameter arrays, and optionally the optimiser state
//! needed to resume training.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::container::{Kind, Reader, Writer};
use crate::error::{ensure, Error, Result};
use crate::model::{build_network, EpochReport, Network, NetworkConfig, TrainState};

/// Version of the checkpoint payload inside the container.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Label used in result tables: `inv`, `noinv`, `noinv_aug`, ...
    pub model: String,
    pub config: RunConfig,
    /// Best-validation parameters, in network order.
    pub params: Vec<NamedArray>,
    pub state: Option<TrainState>,
    pub history: Vec<EpochReport>,
}

fn named_params(net: &Network) -> Vec<NamedArray> {
    let mut out = Vec::new();
    for l in &net.layers {
        out.push(NamedArray {
            name: format!("{}.weights", l.name),
            shape: l.weights.shape().to_vec(),
            values: l.weights.iter().copied().collect(),
        });
        if let Some(b) = &l.bias {
            out.push(NamedArray {
                name: format!("{}.bias", l.name),
                shape: vec![b.len()],
                values: b.to_vec(),
            });
        }
    }
    out
}

fn write_vecs<W: Write>(w: &mut Writer<W>, vs: &[Vec<f64>]) -> Result<()> {
    w.u64(vs.len() as u64)?;
    for v in vs {
        w.u64(v.len() as u64)?;
        w.f64_slice(v)?;
    }
    Ok(())
}

fn read_vecs<R: Read>(r: &mut Reader<R>) -> Result<Vec<Vec<f64>>> {
    let n = r.len_prefix(8)?;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let len = r.len_prefix(8)?;
        out.push(r.f64_vec(len)?);
    }
    Ok(out)
}

fn write_history<W: Write>(w: &mut Writer<W>, h: &[EpochReport]) -> Result<()> {
    w.u64(h.len() as u64)?;
    for e in h {
        w.u64(e.epoch as u64)?;
        w.f64(e.train_loss)?;
        w.f64(e.val_loss)?;
        w.f64(e.learning_rate)?;
    }
    Ok(())
}

fn read_history<R: Read>(r: &mut Reader<R>) -> Result<Vec<EpochReport>> {
    let n = r.len_prefix(32)?;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        out.push(EpochReport {
            epoch: r.u64()? as usize,
            train_loss: r.f64()?,
            val_loss: r.f64()?,
            learning_rate: r.f64()?,
        });
    }
    Ok(out)
}

impl Checkpoint {
    /// The stored configuration is `config` with the network section taken
    /// from `net` (its seed still follows `config.seed`).
    pub fn from_network(model: &str, config: &RunConfig, net: &Network, state: Option<&TrainState>) -> Checkpoint {
        let mut config = config.clone();
        config.network = NetworkConfig {
            init_seed: config.seed,
            ..net.config.clone()
        };
        Checkpoint {
            model: model.to_string(),
            config,
            params: named_params(net),
            state: state.cloned(),
            history: state.map(|s| s.history.clone()).unwrap_or_default(),
        }
    }

    /// Rebuilds the network and loads the stored parameters.
    pub fn network(&self) -> Result<Network> {
        let mut net = build_network(&self.config.network)?;
        let expected = named_params(&net);
        ensure!(
            expected.len() == self.params.len(),
            Format,
            "checkpoint holds {} parameter arrays, the configured network has {}",
            self.params.len(),
            expected.len()
        );
        for (e, p) in expected.iter().zip(&self.params) {
            ensure!(
                e.name == p.name && e.shape == p.shape && p.values.len() == e.values.len(),
                Format,
                "parameter {} {:?} does not match {} {:?}",
                p.name,
                p.shape,
                e.name,
                e.shape
            );
        }
        let values: Vec<Vec<f64>> = self.params.iter().map(|p| p.values.clone()).collect();
        net.set_param_vectors(&values)?;
        Ok(net)
    }

    pub fn write_to<W: Write>(&self, inner: W) -> Result<()> {
        let mut w = Writer::new(inner, Kind::Checkpoint)?;
        w.u32(CHECKPOINT_VERSION)?;
        w.str(&self.model)?;
        w.str(&self.config.to_text())?;
        w.u64(self.params.len() as u64)?;
        for p in &self.params {
            w.str(&p.name)?;
            w.u64(p.shape.len() as u64)?;
            for &d in &p.shape {
                w.u64(d as u64)?;
            }
            w.u64(p.values.len() as u64)?;
            w.f64_slice(&p.values)?;
        }
        write_history(&mut w, &self.history)?;
        match &self.state {
            None => w.u32(0)?,
            Some(s) => {
                w.u32(1)?;
                write_vecs(&mut w, &s.params)?;
                write_vecs(&mut w, &s.mean_square)?;
                write_vecs(&mut w, &s.best_params)?;
                w.u64(s.epoch as u64)?;
                w.f64(s.best_val_loss)?;
                w.u64(s.best_epoch as u64)?;
                w.f64(s.learning_rate)?;
                w.u64(s.epochs_since_best as u64)?;
                w.u64(s.epochs_since_lr_change as u64)?;
                w.u64(s.seed)?;
                write_history(&mut w, &s.history)?;
            }
        }
        w.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(inner: R) -> Result<Checkpoint> {
        let mut r = Reader::new(inner, Kind::Checkpoint)?;
        let version = r.u32()?;
        ensure!(
            version == CHECKPOINT_VERSION,
            Format,
            "unsupported checkpoint version {version}"
        );
        let model = r.str()?;
        let config = RunConfig::parse(&r.str()?)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let n = r.len_prefix(8)?;
        let mut params = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = r.str()?;
            let ndim = r.len_prefix(8)?;
            ensure!(ndim <= 8, Format, "parameter {name} has {ndim} dimensions");
            let shape = (0..ndim)
                .map(|_| Ok(r.u64()? as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = r.len_prefix(8)?;
            ensure!(
                shape.iter().product::<usize>() == len,
                Format,
                "parameter {name} shape {shape:?} does not hold {len} values"
            );
            params.push(NamedArray {
                name,
                shape,
                values: r.f64_vec(len)?,
            });
        }
        let history = read_history(&mut r)?;
        let state = match r.u32()? {
            0 => None,
            1 => Some(TrainState {
                params: read_vecs(&mut r)?,
                mean_square: read_vecs(&mut r)?,
                best_params: read_vecs(&mut r)?,
                epoch: r.u64()? as usize,
                best_val_loss: r.f64()?,
                best_epoch: r.u64()? as usize,
                learning_rate: r.f64()?,
                epochs_since_best: r.u64()? as usize,
                epochs_since_lr_change: r.u64()? as usize,
                seed: r.u64()?,
                history: read_history(&mut r)?,
            }),
            f => return Err(Error::Format(format!("bad optimiser-state flag {f}"))),
        };
        Ok(Checkpoint {
            model,
            config,
            params,
            state,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let f = File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Checkpoint::read_from(BufReader::new(f))
    }
}
