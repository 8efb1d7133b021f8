//! Little-endian helpers shared by the binary file formats.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub(crate) fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], version: u32) -> io::Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(version)
}

/// Reads and validates a magic/version header.
pub(crate) fn read_header<R: Read>(r: &mut R, magic: &[u8; 4], version: u32) -> Result<()> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found).map_err(|e| eof(e, "header"))?;
    if &found != magic {
        return Err(Error::BadMagic { expected: *magic, found });
    }
    let v = read_u32(r, "header")?;
    if v != version {
        return Err(Error::VersionMismatch { expected: version, found: v });
    }
    Ok(())
}

fn eof(e: io::Error, what: &'static str) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Truncated(what)
    } else {
        Error::Io(e)
    }
}

pub(crate) fn read_u8<R: Read>(r: &mut R, what: &'static str) -> Result<u8> {
    r.read_u8().map_err(|e| eof(e, what))
}

pub(crate) fn read_u16<R: Read>(r: &mut R, what: &'static str) -> Result<u16> {
    r.read_u16::<LittleEndian>().map_err(|e| eof(e, what))
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(|e| eof(e, what))
}

pub(crate) fn read_u64<R: Read>(r: &mut R, what: &'static str) -> Result<u64> {
    r.read_u64::<LittleEndian>().map_err(|e| eof(e, what))
}

pub(crate) fn read_f32<R: Read>(r: &mut R, what: &'static str) -> Result<f32> {
    r.read_f32::<LittleEndian>().map_err(|e| eof(e, what))
}

pub(crate) fn read_f64<R: Read>(r: &mut R, what: &'static str) -> Result<f64> {
    r.read_f64::<LittleEndian>().map_err(|e| eof(e, what))
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize, what: &'static str) -> Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out).map_err(|e| eof(e, what))?;
    Ok(out)
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> io::Result<()> {
    for &v in values {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

/// Fails with `Corrupt` if the reader still has bytes left.
pub(crate) fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Corrupt("trailing bytes after payload".into())),
    }
}

pub(crate) fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidConfig(format!("{what} {n} exceeds u32")))
}
