//! `PAWC` checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "PAWC" | version | tensor count
//! name table, per tensor: name length | UTF-8 name | rank | dims...
//! payloads, in table order: IEEE-754 binary32 little-endian values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"PAWC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_params<T: Real, W: Write>(out: &mut W, params: &ParamSet<T>) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.dims().len() as u32).to_le_bytes())?;
        for &d in t.dims() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for t in params.tensors() {
        for v in t.data() {
            let f = v.to_f32().expect("finite parameter");
            out.write_all(&f.to_le_bytes())?;
        }
    }
    Ok(())
}

enum ReadFail {
    Io(std::io::Error),
    Truncated,
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ReadFail> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ReadFail::Truncated
        } else {
            ReadFail::Io(e)
        }
    })?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a parameter table; `origin` names the source in error messages.
pub fn read_params<R: Read>(input: &mut R, origin: &Path) -> Result<ParamSet<f32>> {
    let corrupt = |what: &str| Error::CorruptCheckpoint(format!("{}: {what}", origin.display()));
    let lift = |e: ReadFail| match e {
        ReadFail::Truncated => corrupt("truncated"),
        ReadFail::Io(e) => Error::io(format!("reading {}", origin.display()), e),
    };
    let mut magic = [0u8; 4];
    if input.read_exact(&mut magic).is_err() || &magic != MAGIC {
        return Err(Error::NotCheckpoint(origin.to_path_buf()));
    }
    let version = read_u32(input).map_err(lift)?;
    if version > CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let count = read_u32(input).map_err(lift)? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(input).map_err(lift)? as usize;
        if len > 4096 {
            return Err(corrupt("implausible name length"));
        }
        let mut name = vec![0u8; len];
        input
            .read_exact(&mut name)
            .map_err(|_| corrupt("truncated name table"))?;
        let name = String::from_utf8(name).map_err(|_| corrupt("name is not UTF-8"))?;
        let rank = read_u32(input).map_err(lift)? as usize;
        if rank == 0 || rank > 8 {
            return Err(corrupt("implausible tensor rank"));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(input).map_err(lift)? as usize);
        }
        table.push((name, dims));
    }
    let mut params = ParamSet::new();
    for (name, dims) in table {
        let len: usize = dims.iter().product();
        let mut bytes = vec![0u8; len * 4];
        input
            .read_exact(&mut bytes)
            .map_err(|_| corrupt(&format!("payload of `{name}` truncated")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| corrupt(&e.to_string()))?;
        params
            .push(name, t)
            .map_err(|_| corrupt("duplicate tensor name"))?;
    }
    let mut rest = [0u8; 1];
    if matches!(input.read(&mut rest), Ok(n) if n > 0) {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok(params)
}

pub fn save_params<T: Real>(params: &ParamSet<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    write_params(&mut w, params)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_params(path: &Path) -> Result<ParamSet<f32>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_params(&mut BufReader::new(file), path)
}

pub fn save<T: Real>(net: &Network<T>, path: &Path) -> Result<()> {
    save_params(&net.params, path)
}

/// Loads parameters for `spec`, checking that names and dims match what the
/// spec instantiates.
pub fn load(spec: &NetworkSpec, path: &Path) -> Result<Network<f32>> {
    attach(spec, load_params(path)?)
        .map_err(|_| Error::CorruptCheckpoint(format!("{} does not hold the parameters of `{}`", path.display(), spec.name)))
}

/// Pairs `params` with `spec` after checking names and dims.
pub fn attach(spec: &NetworkSpec, params: ParamSet<f32>) -> Result<Network<f32>> {
    let (_, want) = spec.plan()?;
    let matches = want.len() == params.len()
        && want
            .iter()
            .zip(params.iter())
            .all(|(w, (name, t))| w.name == name && w.dims == t.dims());
    if !matches {
        return Err(Error::CorruptCheckpoint(format!(
            "parameters do not match the layout of `{}`",
            spec.name
        )));
    }
    Ok(Network {
        spec: spec.clone(),
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{build, presets};
    use std::io::Cursor;

    fn bytes_of(params: &ParamSet<f32>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_params(&mut buf, params).unwrap();
        buf
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let net = build::<f32>(&presets::desk_frl(6, 8), 9).unwrap();
        let buf = bytes_of(&net.params);
        let back = read_params(&mut Cursor::new(&buf), Path::new("mem")).unwrap();
        assert!(back.bit_eq(&net.params));
        assert_eq!(bytes_of(&back), buf);
    }

    #[test]
    fn header_layout() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap()).unwrap();
        let b = bytes_of(&p);
        assert_eq!(&b[..4], b"PAWC");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(&b[16..17], b"w");
        assert_eq!(&b[b.len() - 8..b.len() - 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn wrong_magic() {
        let err = read_params(&mut Cursor::new(b"XXXX\x01\0\0\0"), Path::new("x.pawc")).unwrap_err();
        assert!(matches!(err, Error::NotCheckpoint(_)));
        assert!(err.to_string().contains("not a checkpoint"));
    }

    #[test]
    fn future_version() {
        let mut b = bytes_of(&ParamSet::<f32>::new());
        b[4..8].copy_from_slice(&999u32.to_le_bytes());
        let err = read_params(&mut Cursor::new(&b), Path::new("v.pawc")).unwrap_err();
        assert!(err.to_string().contains("unsupported version"));
    }

    #[test]
    fn truncated_payload() {
        let net = build::<f32>(&presets::desk_student(6, 8), 1).unwrap();
        let b = bytes_of(&net.params);
        for cut in [10, b.len() / 2, b.len() - 1] {
            let err = read_params(&mut Cursor::new(&b[..cut]), Path::new("t.pawc")).unwrap_err();
            assert!(err.to_string().contains("corrupt checkpoint"), "{cut}: {err}");
        }
    }

    #[test]
    fn load_rejects_foreign_spec() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pawc");
        let net = build::<f32>(&presets::desk_student(6, 8), 1).unwrap();
        save(&net, &path).unwrap();
        assert!(load(&presets::desk_student(6, 8), &path).unwrap().params.bit_eq(&net.params));
        assert!(load(&presets::desk_frl(6, 8), &path).is_err());
    }
}
