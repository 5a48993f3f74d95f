//! On-disk model format.
//!
//! Layout (little-endian): magic "SPNW", version byte, arch id string
//! (u8 length + bytes), k (u8), C (u16), c_in (u16), c_lat (u16),
//! parameter count (u32), FNV-1a 64 checksum of the parameter bytes,
//! then the parameters as f64.

use std::io::{Read, Write};
use std::path::Path;

use super::arch::{ArchId, Network};
use crate::error::{Error, Result};
use crate::fnv1a64;

pub const MODEL_MAGIC: &[u8; 4] = b"SPNW";
pub const MODEL_VERSION: u8 = 1;

pub fn write_model(net: &Network, w: &mut impl Write) -> Result<()> {
    let name = net.arch.as_str().as_bytes();
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&[MODEL_VERSION, name.len() as u8])?;
    w.write_all(name)?;
    w.write_all(&[net.k as u8])?;
    w.write_all(&(net.c as u16).to_le_bytes())?;
    w.write_all(&(net.c_in as u16).to_le_bytes())?;
    w.write_all(&(net.c_lat as u16).to_le_bytes())?;
    w.write_all(&(net.params.len() as u32).to_le_bytes())?;
    let mut body = Vec::with_capacity(net.params.len() * 8);
    for &p in &net.params {
        body.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&fnv1a64(&body).to_le_bytes())?;
    w.write_all(&body)?;
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<Network> {
    let bad = |msg: &str| Error::Network(format!("model file: {}", msg));
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..4] != MODEL_MAGIC {
        return Err(bad("bad magic"));
    }
    if head[4] != MODEL_VERSION {
        return Err(bad("unsupported version"));
    }
    let mut name = vec![0u8; head[5] as usize];
    r.read_exact(&mut name).map_err(|_| bad("truncated arch id"))?;
    let arch = ArchId::from_str(
        std::str::from_utf8(&name).map_err(|_| bad("arch id is not utf-8"))?,
    )?;
    let mut fixed = [0u8; 11];
    r.read_exact(&mut fixed).map_err(|_| bad("truncated header"))?;
    let k = fixed[0] as usize;
    let c = u16::from_le_bytes([fixed[1], fixed[2]]) as usize;
    let c_in = u16::from_le_bytes([fixed[3], fixed[4]]) as usize;
    let c_lat = u16::from_le_bytes([fixed[5], fixed[6]]) as usize;
    let n = u32::from_le_bytes([fixed[7], fixed[8], fixed[9], fixed[10]]) as usize;
    let mut sum = [0u8; 8];
    r.read_exact(&mut sum).map_err(|_| bad("truncated checksum"))?;
    let mut body = vec![0u8; n * 8];
    r.read_exact(&mut body).map_err(|_| bad("truncated parameters"))?;
    if fnv1a64(&body) != u64::from_le_bytes(sum) {
        return Err(bad("checksum mismatch"));
    }
    let mut net = Network::new(arch, k, c, c_in, c_lat)?;
    if net.params.len() != n {
        return Err(bad(&format!(
            "parameter count {} does not match layout ({})",
            n,
            net.params.len()
        )));
    }
    for (i, chunk) in body.chunks_exact(8).enumerate() {
        net.params[i] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(net)
}

pub fn save_model(net: &Network, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write_model(net, &mut f)
}

pub fn load_model(path: &Path) -> Result<Network> {
    let mut f = std::fs::File::open(path)?;
    read_model(&mut f)
}
