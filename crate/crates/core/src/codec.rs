//! Big-endian payload encoding shared by every message type.
//!
//! Integers are fixed-width big-endian; byte strings, big integers and lists
//! are prefixed with a `u32` length or count.

use num_bigint::BigUint;

use crate::transport::TransportError;

#[derive(Default, Debug, Clone)]
pub struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u128(&mut self, v: u128) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
        self
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    pub fn biguint(&mut self, v: &BigUint) -> &mut Self {
        self.bytes(&v.to_bytes_be())
    }

    pub fn f64s(&mut self, v: &[f64]) -> &mut Self {
        self.u32(v.len() as u32);
        for x in v {
            self.f64(*x);
        }
        self
    }

    pub fn u64s(&mut self, v: &[u64]) -> &mut Self {
        self.u32(v.len() as u32);
        for x in v {
            self.u64(*x);
        }
        self
    }

    pub fn u128s(&mut self, v: &[u128]) -> &mut Self {
        self.u32(v.len() as u32);
        for x in v {
            self.u128(*x);
        }
        self
    }

    pub fn bigs(&mut self, v: &[BigUint]) -> &mut Self {
        self.u32(v.len() as u32);
        for x in v {
            self.biguint(x);
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct PayloadReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn short(what: &str) -> TransportError {
    TransportError::Decode(format!("payload truncated while reading {what}"))
}

impl<'a> PayloadReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TransportError> {
        if self.buf.len() - self.pos < n {
            return Err(short(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, TransportError> {
        Ok(self.take(1, "u8")?[0])
    }

    pub fn u32(&mut self) -> Result<u32, TransportError> {
        Ok(u32::from_be_bytes(self.take(4, "u32")?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, TransportError> {
        Ok(u64::from_be_bytes(self.take(8, "u64")?.try_into().unwrap()))
    }

    pub fn u128(&mut self) -> Result<u128, TransportError> {
        Ok(u128::from_be_bytes(self.take(16, "u128")?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, TransportError> {
        Ok(f64::from_be_bytes(self.take(8, "f64")?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], TransportError> {
        let n = self.u32()? as usize;
        self.take(n, "byte string")
    }

    pub fn str(&mut self) -> Result<String, TransportError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| TransportError::Decode("invalid utf-8".into()))
    }

    pub fn biguint(&mut self) -> Result<BigUint, TransportError> {
        Ok(BigUint::from_bytes_be(self.bytes()?))
    }

    fn count(&mut self, width: usize) -> Result<usize, TransportError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(width) > self.buf.len() - self.pos {
            return Err(short("list"));
        }
        Ok(n)
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>, TransportError> {
        let n = self.count(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn u64s(&mut self) -> Result<Vec<u64>, TransportError> {
        let n = self.count(8)?;
        (0..n).map(|_| self.u64()).collect()
    }

    pub fn u128s(&mut self) -> Result<Vec<u128>, TransportError> {
        let n = self.count(16)?;
        (0..n).map(|_| self.u128()).collect()
    }

    pub fn bigs(&mut self) -> Result<Vec<BigUint>, TransportError> {
        let n = self.count(4)?;
        (0..n).map(|_| self.biguint()).collect()
    }

    pub fn finish(self) -> Result<(), TransportError> {
        if self.pos != self.buf.len() {
            return Err(TransportError::Decode(format!("{} trailing payload bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn mixed_payload_roundtrip(
            a in any::<u64>(),
            xs in proptest::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 0..20),
            s in ".{0,16}",
            big in proptest::collection::vec(any::<u8>(), 0..40),
        ) {
            let b = BigUint::from_bytes_be(&big);
            let mut w = PayloadWriter::new();
            w.u64(a).f64s(&xs).str(&s).biguint(&b);
            let bytes = w.finish();
            let mut r = PayloadReader::new(&bytes);
            prop_assert_eq!(r.u64().unwrap(), a);
            prop_assert_eq!(r.f64s().unwrap(), xs);
            prop_assert_eq!(r.str().unwrap(), s);
            prop_assert_eq!(r.biguint().unwrap(), b);
            r.finish().unwrap();
        }
    }

    #[test]
    fn truncated_input_is_an_error() {
        let mut w = PayloadWriter::new();
        w.f64s(&[1.0, 2.0]);
        let bytes = w.finish();
        assert!(PayloadReader::new(&bytes[..bytes.len() - 1]).f64s().is_err());
        let mut r = PayloadReader::new(&[0, 0, 0, 200]);
        assert!(r.bytes().is_err());
    }
}
