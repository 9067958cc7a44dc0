//! Little-endian byte reading shared by the binary file formats.

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn read_u16(rd: &mut Reader<'_>) -> Result<u16> {
    Ok(u16::from_le_bytes(rd.take(2)?.try_into().unwrap()))
}

pub(crate) fn read_u32(rd: &mut Reader<'_>) -> Result<u32> {
    Ok(u32::from_le_bytes(rd.take(4)?.try_into().unwrap()))
}

pub(crate) fn read_u64(rd: &mut Reader<'_>) -> Result<u64> {
    Ok(u64::from_le_bytes(rd.take(8)?.try_into().unwrap()))
}

pub(crate) fn read_f32(rd: &mut Reader<'_>) -> Result<f32> {
    Ok(f32::from_le_bytes(rd.take(4)?.try_into().unwrap()))
}

pub(crate) fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}
