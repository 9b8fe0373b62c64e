//! Binary checkpoint format.
//!
//! ```text
//! ns-ckpt v1\n
//! <name>\t<d0>,<d1>,...\n  <prod(dims) little-endian f32>
//! ...                                  (one record per parameter)
//! ```
//!
//! Records are ordered lexicographically by parameter name. Values are
//! always stored as `f32`, whatever precision the store was trained in.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::{lit, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "ns-ckpt v1";

pub fn write_checkpoint<T: Real, W: Write>(store: &ParamStore<T>, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    for p in store.sorted() {
        let dims: Vec<String> = p.tensor.shape().iter().map(usize::to_string).collect();
        writeln!(w, "{}\t{}", p.name, dims.join(","))?;
        let mut bytes = Vec::with_capacity(p.tensor.len() * 4);
        for v in p.tensor.data() {
            bytes.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()
}

pub fn read_checkpoint<T: Real, R: Read>(r: R, origin: &Path) -> Result<ParamStore<T>> {
    let mut r = BufReader::new(r);
    let bad = |reason: String| Error::format(origin, reason);
    let mut line = Vec::new();
    let read_line = |r: &mut BufReader<R>, line: &mut Vec<u8>| -> Result<usize> {
        line.clear();
        r.read_until(b'\n', line).map_err(|e| Error::io(origin, e))
    };
    read_line(&mut r, &mut line)?;
    if line != format!("{CHECKPOINT_MAGIC}\n").as_bytes() {
        return Err(bad("missing ns-ckpt v1 header".into()));
    }
    let mut store = ParamStore::new();
    let mut last_name: Option<String> = None;
    loop {
        if read_line(&mut r, &mut line)? == 0 {
            break;
        }
        let text = std::str::from_utf8(&line).map_err(|_| bad("record header is not UTF-8".into()))?;
        let text = text
            .strip_suffix('\n')
            .ok_or_else(|| bad("truncated record header".into()))?;
        let (name, dims) = text
            .split_once('\t')
            .ok_or_else(|| bad(format!("record header {text:?} lacks a tab")))?;
        let shape: Vec<usize> = dims
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("bad shape {dims:?} for {name}")))?;
        if last_name.as_deref().is_some_and(|prev| prev >= name) {
            return Err(bad(format!("parameter {name:?} out of lexicographic order")));
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| bad(format!("truncated data for {name}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| lit::<T>(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
        last_name = Some(name.to_string());
    }
    Ok(store)
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(store, std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(f, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store_from(params: &[(String, Vec<f32>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (name, v) in params {
            s.insert(
                name.clone(),
                Tensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect()).unwrap(),
            )
            .unwrap();
        }
        s
    }

    #[test]
    fn layout_is_sorted_and_little_endian() {
        let mut s = ParamStore::<f64>::new();
        s.insert("b", Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        s.insert("a", Tensor::scalar(0.5)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        let mut want = b"ns-ckpt v1\na\t1\n".to_vec();
        want.extend_from_slice(&0.5f32.to_le_bytes());
        want.extend_from_slice(b"b\t1,2\n");
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_bad_header_and_truncation() {
        let p = Path::new("mem");
        assert!(read_checkpoint::<f32, _>(&b"ns-ckpt v2\n"[..], p).is_err());
        assert!(read_checkpoint::<f32, _>(&b"ns-ckpt v1\nx\t2\n\0\0\0\0"[..], p).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_f32_values(
            params in prop::collection::btree_map("[a-z][a-z0-9._]{0,12}", prop::collection::vec(-1e6f32..1e6, 1..20), 1..6)
        ) {
            let params: Vec<_> = params.into_iter().collect();
            let s = store_from(&params);
            let mut buf = Vec::new();
            write_checkpoint(&s, &mut buf).unwrap();
            let back: ParamStore<f64> = read_checkpoint(&buf[..], Path::new("mem")).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
