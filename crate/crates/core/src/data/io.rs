use std::io::{Read, Write};
use std::path::Path;

use super::{Dataset, Sample};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BIONETDS";
const VERSION: u32 = 1;

/// Writes the flat binary form: header, then per sample the seed, index, image (f32 LE) and mask.
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, ds.len() as u32, ds.channels as u32, ds.height as u32, ds.width as u32, ds.classes as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in &ds.samples {
        buf.extend_from_slice(&s.seed.to_le_bytes());
        buf.extend_from_slice(&s.index.to_le_bytes());
        for v in &s.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&s.mask);
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |offset: usize, message: &str| Error::Parse {
        location: format!("{}:byte {offset}", path.display()),
        message: message.to_string(),
    };
    if bytes.len() < 32 || &bytes[..8] != MAGIC {
        return Err(bad(0, "not a dataset file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != VERSION as usize {
        return Err(bad(8, &format!("unsupported version {}", word(0))));
    }
    let (n, c, h, w, k) = (word(1), word(2), word(3), word(4), word(5));
    let per = 16 + 4 * c * h * w + h * w;
    if bytes.len() != 32 + n * per {
        return Err(bad(32, &format!("expected {} bytes of samples, found {}", n * per, bytes.len() - 32)));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let b = &bytes[32 + i * per..32 + (i + 1) * per];
        let image = b[16..16 + 4 * c * h * w]
            .chunks_exact(4)
            .map(|q| f32::from_le_bytes(q.try_into().unwrap()))
            .collect();
        let mask: Vec<u8> = b[16 + 4 * c * h * w..].to_vec();
        if let Some(&m) = mask.iter().find(|&&m| m as usize >= k) {
            return Err(bad(32 + i * per, &format!("mask class {m} out of range")));
        }
        samples.push(Sample {
            seed: u64::from_le_bytes(b[..8].try_into().unwrap()),
            index: u64::from_le_bytes(b[8..16].try_into().unwrap()),
            image,
            mask,
        });
    }
    Ok(Dataset {
        channels: c,
        height: h,
        width: w,
        classes: k,
        samples,
    })
}
