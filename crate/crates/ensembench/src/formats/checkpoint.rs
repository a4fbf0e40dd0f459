//! Model checkpoints: a `key = value` manifest, a blank line, then named
//! tensor records (`u32` name length, UTF-8 name, `TNSR` dump).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ensembench_core::zoo::{ArchitectureSpec, Family, Head, ModelInstance};
use ensembench_core::RngStream;

use super::kv::{self, Block};
use super::tnsr::{self, Cursor};
use crate::{Error, Result};

pub const FORMAT: &str = "ensembench-checkpoint-1";

pub fn spec_lines(spec: &ArchitectureSpec) -> String {
    let [h, w, c] = spec.input;
    format!(
        "family = {}\ndepth = {}\nwidth = {}\nclasses = {}\nhead = {}\ninput = {}x{}x{}\ndropout = {}\n",
        spec.family, spec.depth, spec.width, spec.num_classes, spec.head, h, w, c, spec.dropout
    )
}

pub fn parse_input(s: &str) -> Option<[usize; 3]> {
    let v: Vec<usize> = s.split('x').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    v.try_into().ok()
}

pub fn spec_from_block(b: &Block, what: &'static str) -> Result<ArchitectureSpec> {
    let family: Family = b.require(what, "family")?.value.parse()?;
    let head: Head = b.require(what, "head")?.value.parse()?;
    let input_entry = b.require(what, "input")?;
    let [h, w, c] = parse_input(&input_entry.value)
        .ok_or_else(|| Error::format(what, 0, format!("bad input `{}`", input_entry.value)))?;
    let spec = ArchitectureSpec::new(
        family,
        b.parse(what, "depth")?,
        b.parse(what, "width")?,
        b.parse(what, "classes")?,
    )
    .with_input(h, w, c)
    .with_head(head)
    .with_dropout(b.parse(what, "dropout")?);
    spec.validate()?;
    Ok(spec)
}

pub fn to_bytes(model: &ModelInstance<f32>) -> Vec<u8> {
    let state = model.state();
    let mut out = format!(
        "format = {}\n{}tensors = {}\n\n",
        FORMAT,
        spec_lines(model.spec()),
        state.len()
    )
    .into_bytes();
    for (name, t) in &state {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&tnsr::to_bytes(t));
    }
    out
}

pub fn write(path: &Path, model: &ModelInstance<f32>) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(Error::io(path))?);
    f.write_all(&to_bytes(model))
        .and_then(|_| f.flush())
        .map_err(Error::io(path))
}

/// Reads the manifest up to and including the blank separator line.
fn read_header<R: Read>(c: &mut Cursor<R>) -> Result<String> {
    let mut text = Vec::new();
    let mut b = [0u8; 1];
    loop {
        c.exact("checkpoint manifest", &mut b)?;
        text.push(b[0]);
        if text.ends_with(b"\n\n") {
            break;
        }
        if text.len() > 1 << 16 {
            return Err(Error::format(
                "checkpoint manifest",
                c.offset,
                "no blank line ends the manifest",
            ));
        }
    }
    String::from_utf8(text).map_err(|_| Error::format("checkpoint manifest", 0, "not UTF-8"))
}

pub fn from_reader<R: Read>(r: R) -> Result<ModelInstance<f32>> {
    let mut c = Cursor::new(r, 0);
    let header = read_header(&mut c)?;
    let block = Block(kv::parse(&header)?);
    let format = &block.require("checkpoint manifest", "format")?.value;
    if format != FORMAT {
        return Err(Error::format(
            "checkpoint manifest",
            0,
            format!("unsupported format `{}`", format),
        ));
    }
    let spec = spec_from_block(&block, "checkpoint manifest")?;
    let count: usize = block.parse("checkpoint manifest", "tensors")?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32("tensor name length")? as usize;
        if len > 4096 {
            return Err(Error::format(
                "tensor name length",
                c.offset - 4,
                format!("{} bytes", len),
            ));
        }
        let mut name = vec![0u8; len];
        c.exact("tensor name", &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("tensor name", c.offset, "not UTF-8"))?;
        entries.push((name, tnsr::read_from(&mut c)?));
    }
    if !c.at_end()? {
        unreachable!("at_end errors on trailing bytes");
    }
    let mut model = ModelInstance::build(&spec, &mut RngStream::new(0, 0))?;
    model.load_state(entries)?;
    Ok(model)
}

pub fn read(path: &Path) -> Result<ModelInstance<f32>> {
    let f = File::open(path).map_err(Error::io(path))?;
    from_reader(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_every_tensor() {
        let spec = ArchitectureSpec::resnet(8, 2, 3)
            .with_input(8, 8, 3)
            .with_head(Head::Cosine);
        let m = ModelInstance::<f32>::build(&spec, &mut RngStream::new(1, 2)).unwrap();
        let bytes = to_bytes(&m);
        let back = from_reader(&bytes[..]).unwrap();
        assert_eq!(back.spec(), m.spec());
        assert_eq!(back.state(), m.state());
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_inputs_fail() {
        let spec = ArchitectureSpec::vgg(5, 2, 2).with_input(16, 16, 3);
        let m = ModelInstance::<f32>::build(&spec, &mut RngStream::new(1, 2)).unwrap();
        let bytes = to_bytes(&m);
        assert!(from_reader(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_reader(&extra[..]).is_err());
        let bad = String::from_utf8_lossy(&bytes).replace("depth = 5", "depth = 6");
        assert!(from_reader(bad.as_bytes()).is_err());
    }
}
