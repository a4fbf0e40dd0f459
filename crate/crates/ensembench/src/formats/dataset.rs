//! CIFAR binary batches and the portable `SDS1` dataset format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ensembench_core::data::DatasetSplit;

use super::tnsr::Cursor;
use crate::{Error, Result};

pub const CIFAR_SHAPE: [usize; 3] = [32, 32, 3];
const PLANE: usize = 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + 3 * PLANE
    }

    /// Train and test files below a dataset root, in the layout of the
    /// published binary archives.
    pub fn files(self, root: &Path) -> (Vec<PathBuf>, PathBuf) {
        match self {
            CifarVariant::Cifar10 => {
                let dir = root.join("cifar-10-batches-bin");
                let train = (1..=5).map(|i| dir.join(format!("data_batch_{}.bin", i))).collect();
                (train, dir.join("test_batch.bin"))
            }
            CifarVariant::Cifar100 => {
                let dir = root.join("cifar-100-binary");
                (vec![dir.join("train.bin")], dir.join("test.bin"))
            }
        }
    }
}

/// Decodes CIFAR records (label bytes, then R, G and B planes) into HWC.
pub fn decode_cifar(bytes: &[u8], variant: CifarVariant) -> Result<DatasetSplit> {
    let rec = variant.record_len();
    if !bytes.len().is_multiple_of(rec) {
        let whole = bytes.len() / rec * rec;
        return Err(Error::format(
            "CIFAR record",
            whole as u64,
            format!(
                "truncated: {} trailing bytes, records are {} bytes",
                bytes.len() - whole,
                rec
            ),
        ));
    }
    let n = bytes.len() / rec;
    let k = variant.classes();
    let mut images = Vec::with_capacity(n * 3 * PLANE);
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let lb = variant.label_bytes();
        let label = r[lb - 1] as usize;
        if label >= k {
            return Err(Error::format(
                "CIFAR label",
                (i * rec + lb - 1) as u64,
                format!("label {} outside 0..{}", label, k),
            ));
        }
        labels.push(label as u32);
        let px = &r[lb..];
        for p in 0..PLANE {
            images.extend_from_slice(&[px[p], px[PLANE + p], px[2 * PLANE + p]]);
        }
    }
    Ok(DatasetSplit::new(images, labels, CIFAR_SHAPE, k)?)
}

/// Loads and concatenates CIFAR batch files.
pub fn load_cifar(files: &[PathBuf], variant: CifarVariant) -> Result<DatasetSplit> {
    let mut bytes = Vec::new();
    for f in files {
        let mut part = Vec::new();
        File::open(f)
            .and_then(|mut h| h.read_to_end(&mut part))
            .map_err(Error::io(f))?;
        if part.len() % variant.record_len() != 0 {
            return decode_cifar(&part, variant).map_err(|e| match e {
                Error::Format { what, offset, detail } => Error::Format {
                    what,
                    offset,
                    detail: format!("{}: {}", f.display(), detail),
                },
                other => other,
            });
        }
        bytes.extend_from_slice(&part);
    }
    decode_cifar(&bytes, variant)
}

pub const SDS_MAGIC: &[u8; 4] = b"SDS1";

/// `SDS1`, then little-endian `u32` count, H, W, C, K; each record is a
/// `u32` label followed by H*W*C bytes in HWC order.
pub fn write_portable<W: Write>(w: &mut W, split: &DatasetSplit) -> std::io::Result<()> {
    let [h, wd, c] = split.shape();
    w.write_all(SDS_MAGIC)?;
    for v in [split.len(), h, wd, c, split.num_classes()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for i in 0..split.len() {
        w.write_all(&split.labels()[i].to_le_bytes())?;
        w.write_all(split.image(i))?;
    }
    Ok(())
}

pub fn read_portable<R: Read>(r: R) -> Result<DatasetSplit> {
    let mut c = Cursor::new(r, 0);
    let mut magic = [0u8; 4];
    c.exact("SDS1 magic", &mut magic)?;
    if &magic != SDS_MAGIC {
        return Err(Error::format("SDS1 magic", 0, format!("found {:?}", magic)));
    }
    let count = c.u32("SDS1 count")? as usize;
    let h = c.u32("SDS1 height")? as usize;
    let w = c.u32("SDS1 width")? as usize;
    let ch = c.u32("SDS1 channels")? as usize;
    let k = c.u32("SDS1 classes")? as usize;
    let px = h * w * ch;
    let mut images = vec![0u8; count * px];
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let at = c.offset;
        let l = c.u32("SDS1 label")?;
        if l as usize >= k {
            return Err(Error::format("SDS1 label", at, format!("label {} outside 0..{}", l, k)));
        }
        labels.push(l);
        c.exact("SDS1 pixels", &mut images[i * px..(i + 1) * px])?;
    }
    c.at_end()?;
    Ok(DatasetSplit::new(images, labels, [h, w, ch], k)?)
}

pub fn save_portable(path: &Path, split: &DatasetSplit) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(Error::io(path))?);
    write_portable(&mut f, split)
        .and_then(|_| f.flush())
        .map_err(Error::io(path))
}

pub fn load_portable(path: &Path) -> Result<DatasetSplit> {
    read_portable(BufReader::new(File::open(path).map_err(Error::io(path))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ensembench_core::data::synth_clusters;

    #[test]
    fn cifar100_keeps_fine_label() {
        let mut rec = vec![3u8, 42];
        rec.extend((0..3 * PLANE).map(|i| (i % 256) as u8));
        let s = decode_cifar(&rec, CifarVariant::Cifar100).unwrap();
        assert_eq!(s.labels(), &[42]);
        assert_eq!(&s.image(0)[..3], &[0, (PLANE % 256) as u8, (2 * PLANE % 256) as u8]);
        rec[1] = 100;
        assert!(matches!(
            decode_cifar(&rec, CifarVariant::Cifar100),
            Err(Error::Format { offset: 1, .. })
        ));
    }

    #[test]
    fn portable_round_trip() {
        let d = synth_clusters(3, 4, [2, 3, 1], 2.0, 1).unwrap();
        let mut b = Vec::new();
        write_portable(&mut b, &d).unwrap();
        assert_eq!(read_portable(&b[..]).unwrap(), d);
        assert!(read_portable(&b[..b.len() - 1]).is_err());
        let mut empty = Vec::new();
        empty.extend_from_slice(SDS_MAGIC);
        for v in [0u32, 4, 4, 3, 10] {
            empty.extend_from_slice(&v.to_le_bytes());
        }
        assert!(read_portable(&empty[..]).unwrap().is_empty());
        b[24] = 9;
        assert!(read_portable(&b[..]).is_err());
    }
}
