use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{History, Optimizer, TrainConfig, Trainer};
use crate::arch::{Network, Topology};
use crate::error::{Error, Result};
use crate::tensor::Real;

const MAGIC: &[u8; 8] = b"BIONETCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    real: String,
    topology: String,
    params: Vec<(String, Vec<usize>)>,
    norms: Vec<String>,
    config: TrainConfig,
    optimizer_step: u64,
    history: History,
    best: Option<(usize, f64)>,
}

fn put_model<T: Real>(buf: &mut Vec<u8>, net: &Network<T>) {
    for (_, p) in net.store.iter() {
        put(buf, p.value.data().iter().map(|v| v.to_f64_lossy()));
    }
    for bn in net.norms().values() {
        put(buf, bn.stats.mean.iter().map(|v| v.to_f64_lossy()));
        put(buf, bn.stats.var.iter().map(|v| v.to_f64_lossy()));
    }
}

fn put(buf: &mut Vec<u8>, xs: impl Iterator<Item = f64>) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn model<T: Real>(&mut self, net: &mut Network<T>) -> Result<()> {
        let ids: Vec<_> = net.store.ids().collect();
        for id in ids {
            let n = net.store.value(id).numel();
            let vals = self.f64s(n)?;
            let p = net.store.get_mut(id);
            p.value.data_mut().iter_mut().zip(vals).for_each(|(d, v)| *d = T::from_f64_lossy(v));
        }
        for bn in net.norms_mut().values_mut() {
            let c = bn.stats.mean.len();
            bn.stats.mean = self.f64s(c)?.into_iter().map(T::from_f64_lossy).collect();
            bn.stats.var = self.f64s(c)?.into_iter().map(T::from_f64_lossy).collect();
        }
        Ok(())
    }
}

fn structure<T: Real>(net: &Network<T>) -> (Vec<(String, Vec<usize>)>, Vec<String>) {
    (
        net.store.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect(),
        net.norms().keys().map(|k| format!("{k:?}")).collect(),
    )
}

/// Writes parameters, normalization statistics, optimizer moments and progress.
pub fn save_checkpoint<T: Real>(trainer: &Trainer<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (params, norms) = structure(&trainer.net);
    let header = Header {
        real: T::NAME.to_string(),
        topology: trainer.net.topology().to_json(),
        params,
        norms,
        config: trainer.config.clone(),
        optimizer_step: trainer.optimizer.step,
        history: trainer.history.clone(),
        best: trainer.best.as_ref().map(|b| (b.0, b.1)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    put_model(&mut buf, &trainer.net);
    for m in trainer.optimizer.first.iter().chain(&trainer.optimizer.second) {
        put(&mut buf, m.iter().copied());
    }
    if let Some(b) = &trainer.best {
        put_model(&mut buf, &b.2);
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn read_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(Header, Reader<'a>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(|_| Error::Checkpoint("not a checkpoint".into()))? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    Ok((header, r))
}

/// Topology recorded in a checkpoint, for building a matching template.
pub fn checkpoint_topology(path: impl AsRef<Path>) -> Result<Topology> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let (header, _) = read_header(&bytes, path)?;
    Topology::from_json(&header.topology, &path.display().to_string())
        .map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Restores a trainer onto `template`, which must have the saved structure.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>, template: Network<T>) -> Result<Trainer<T>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let (header, mut r) = read_header(&bytes, path)?;
    if header.real != T::NAME {
        return Err(Error::Checkpoint(format!("saved as {}, loading as {}", header.real, T::NAME)));
    }
    if header.topology != template.topology().to_json() {
        return Err(Error::Checkpoint("topology differs from the saved network".into()));
    }
    if (header.params, header.norms) != structure(&template) {
        return Err(Error::Checkpoint("parameter layout differs from the saved network".into()));
    }
    let mut net = template;
    r.model(&mut net)?;
    let mut optimizer = Optimizer::new(header.config.optimizer.clone(), &net.store)?;
    optimizer.step = header.optimizer_step;
    for m in optimizer.first.iter_mut().chain(optimizer.second.iter_mut()) {
        *m = r.f64s(m.len())?;
    }
    let best = match header.best {
        Some((e, miou)) => {
            let mut b = net.clone();
            r.model(&mut b)?;
            Some((e, miou, b))
        }
        None => None,
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint body".into()));
    }
    Ok(Trainer {
        net,
        optimizer,
        config: header.config,
        history: header.history,
        best,
    })
}
