//! Little-endian primitives shared by the binary file formats.

use std::io::{Read, Write};

use crate::{Error, Result, C64};

pub(crate) fn put_u8(w: &mut impl Write, v: u8) -> Result<()> {
    Ok(w.write_all(&[v])?)
}

pub(crate) fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub(crate) fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub(crate) fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub(crate) fn put_c64(w: &mut impl Write, v: C64) -> Result<()> {
    put_f64(w, v.re)?;
    put_f64(w, v.im)
}

pub(crate) fn get_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub(crate) fn get_u8(r: &mut impl Read) -> Result<u8> {
    Ok(get_bytes::<1>(r)?[0])
}

pub(crate) fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(get_bytes(r)?))
}

pub(crate) fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get_bytes(r)?))
}

pub(crate) fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(get_bytes(r)?))
}

pub(crate) fn get_c64(r: &mut impl Read) -> Result<C64> {
    Ok(C64::new(get_f64(r)?, get_f64(r)?))
}

pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let found = get_bytes::<4>(r)?;
    if &found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}
