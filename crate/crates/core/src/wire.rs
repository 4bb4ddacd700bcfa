//! Length-prefixed field framing shared by every canonical encoding in the crate.
//!
//! Each field is written as a 4-byte big-endian length followed by the raw
//! bytes. A fixed sequence of such fields is injective over field tuples, which
//! is what transaction ids and chunk digests rely on.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("input ended inside a field")]
    Truncated,
    #[error("{0} trailing bytes after the last field")]
    Trailing(usize),
    #[error("invalid field: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Default, Clone)]
pub struct FieldWriter {
    buf: Vec<u8>,
}

impl FieldWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(&mut self, bytes: &[u8]) -> &mut Self {
        let len = u32::try_from(bytes.len()).expect("field longer than 4 GiB");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.field(&[v])
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.field(&v.to_be_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.field(&v.to_be_bytes())
    }

    /// `None` and `Some(empty)` must encode differently, so options carry a tag byte.
    pub fn opt(&mut self, v: Option<&[u8]>) -> &mut Self {
        match v {
            None => self.field(&[]),
            Some(bytes) => {
                let mut tagged = Vec::with_capacity(bytes.len() + 1);
                tagged.push(1);
                tagged.extend_from_slice(bytes);
                self.field(&tagged)
            }
        }
    }

    pub fn u32_list(&mut self, values: &[u32]) -> &mut Self {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
        self.field(&bytes)
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Clone)]
pub struct FieldReader<'a> {
    rest: &'a [u8],
}

impl<'a> FieldReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { rest: bytes }
    }

    pub fn field(&mut self) -> Result<&'a [u8], WireError> {
        if self.rest.len() < 4 {
            return Err(WireError::Truncated);
        }
        let (len, rest) = self.rest.split_at(4);
        let len = u32::from_be_bytes(len.try_into().unwrap()) as usize;
        if rest.len() < len {
            return Err(WireError::Truncated);
        }
        let (field, rest) = rest.split_at(len);
        self.rest = rest;
        Ok(field)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        match self.field()? {
            [v] => Ok(*v),
            _ => Err(WireError::Invalid("expected 1 byte")),
        }
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        let f = self.field()?;
        Ok(u32::from_be_bytes(
            f.try_into()
                .map_err(|_| WireError::Invalid("expected 4 bytes"))?,
        ))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        let f = self.field()?;
        Ok(u64::from_be_bytes(
            f.try_into()
                .map_err(|_| WireError::Invalid("expected 8 bytes"))?,
        ))
    }

    pub fn opt(&mut self) -> Result<Option<&'a [u8]>, WireError> {
        match self.field()? {
            [] => Ok(None),
            [1, rest @ ..] => Ok(Some(rest)),
            _ => Err(WireError::Invalid("bad option tag")),
        }
    }

    pub fn u32_list(&mut self) -> Result<Vec<u32>, WireError> {
        let f = self.field()?;
        if f.len() % 4 != 0 {
            return Err(WireError::Invalid("u32 list length"));
        }
        Ok(f.chunks_exact(4)
            .map(|c| u32::from_be_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn is_empty(&self) -> bool {
        self.rest.is_empty()
    }

    pub fn finish(self) -> Result<(), WireError> {
        match self.rest.len() {
            0 => Ok(()),
            n => Err(WireError::Trailing(n)),
        }
    }
}

/// Writes `record` as one frame of a record stream.
pub fn write_frame(out: &mut Vec<u8>, record: &[u8]) {
    let mut w = FieldWriter::new();
    w.field(record);
    out.extend_from_slice(&w.finish());
}

/// Splits a stream produced by [`write_frame`] back into records.
pub fn read_frames(mut bytes: &[u8]) -> Result<Vec<&[u8]>, WireError> {
    let mut frames = Vec::new();
    while !bytes.is_empty() {
        let mut r = FieldReader::new(bytes);
        frames.push(r.field()?);
        bytes = r.rest;
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn option_tags_distinguish_none_from_empty() {
        let mut a = FieldWriter::new();
        a.opt(None);
        let mut b = FieldWriter::new();
        b.opt(Some(b""));
        assert_ne!(a.finish(), b.finish());
    }

    #[test]
    fn truncated_input_is_rejected() {
        let mut w = FieldWriter::new();
        w.field(b"hello");
        let bytes = w.finish();
        let mut r = FieldReader::new(&bytes[..bytes.len() - 1]);
        assert_eq!(r.field(), Err(WireError::Truncated));
    }

    #[test]
    fn frames_round_trip() {
        let mut out = Vec::new();
        write_frame(&mut out, b"one");
        write_frame(&mut out, b"");
        write_frame(&mut out, b"three");
        let frames = read_frames(&out).unwrap();
        assert_eq!(frames, vec![&b"one"[..], b"", b"three"]);
    }
}
