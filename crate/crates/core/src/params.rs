//! Named flat parameter storage with bit-exact checkpoint files.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PLPARAM1";
const FORMAT_VERSION: u32 = 1;

/// A parameter store: an ordered set of named slices backed by one flat
/// `f64` vector. Names are unique and the layout is fixed once built; the
/// flat vector is what optimizers and tapes operate on.
#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
    seed: u64,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    offset: usize,
    len: usize,
}

impl ParamStore {
    /// `seed` records the rng seed used at initialization time; it is stored
    /// in checkpoints for provenance.
    pub fn new(seed: u64) -> ParamStore {
        ParamStore { entries: Vec::new(), index: HashMap::new(), data: Vec::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Register a named slice with explicit values.
    pub fn add(&mut self, name: &str, values: Vec<f64>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name '{name}'")));
        }
        let offset = self.data.len();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry { name: name.to_string(), offset, len: values.len() });
        self.data.extend_from_slice(&values);
        Ok(offset)
    }

    /// Register a named slice drawn uniformly from [-bound, bound].
    pub fn add_uniform(
        &mut self,
        name: &str,
        len: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<usize> {
        let values = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, values)
    }

    /// Register a named slice of zeros.
    pub fn add_zeros(&mut self, name: &str, len: usize) -> Result<usize> {
        self.add(name, vec![0.0; len])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// (offset, len) of a named slice within the flat vector.
    pub fn range(&self, name: &str) -> Result<(usize, usize)> {
        let e = self
            .index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter name '{name}'")))?;
        Ok((e.offset, e.len))
    }

    pub fn slice(&self, name: &str) -> Result<&[f64]> {
        let (o, l) = self.range(name)?;
        Ok(&self.data[o..o + l])
    }

    pub fn slice_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let (o, l) = self.range(name)?;
        Ok(&mut self.data[o..o + l])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// View a flat gradient vector through this store's layout.
    pub fn named_grads<'g>(&self, flat: &'g [f64]) -> Result<Vec<(&str, &'g [f64])>> {
        if flat.len() != self.data.len() {
            return Err(Error::Contract(format!(
                "gradient length {} does not match parameter length {}",
                flat.len(),
                self.data.len()
            )));
        }
        Ok(self
            .entries
            .iter()
            .map(|e| (e.name.as_str(), &flat[e.offset..e.offset + e.len]))
            .collect())
    }

    // ── checkpoint file format ───────────────────────────────────────
    //
    // magic (8 bytes) | version u32 | seed u64 | meta (u32 len + utf8)
    // | entry count u32 | per entry: name (u32 len + utf8), len u64,
    // values as little-endian f64. Round-trips are bit-exact.

    pub fn write_to(&self, w: &mut impl Write, meta: &str) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&(e.len as u64).to_le_bytes())?;
            for &v in &self.data[e.offset..e.offset + e.len] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Returns the store and the stored metadata string.
    pub fn read_from(r: &mut impl Read) -> Result<(ParamStore, String)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let seed = read_u64(r)?;
        let meta = read_string(r)?;
        let n = read_u32(r)? as usize;
        let mut store = ParamStore::new(seed);
        for _ in 0..n {
            let name = read_string(r)?;
            let len = read_u64(r)? as usize;
            let mut values = vec![0.0; len];
            let mut buf = [0u8; 8];
            for v in values.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            store.add(&name, values)?;
        }
        Ok((store, meta))
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f, meta)
    }

    pub fn load(path: &Path) -> Result<(ParamStore, String)> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        ParamStore::read_from(&mut f)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid utf8 in checkpoint".into()))
}
