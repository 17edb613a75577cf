//! Binary PPM (P6) frames and PGM (P5) masks, maxval 255.

use crate::error::{Error, Result};
use crate::field::{Frame, Mask, Raster};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

/// Encodes a frame as P6 (3 channels) or P5 (1 channel).
pub fn encode_pnm(frame: &Frame) -> Vec<u8> {
    let (h, w) = frame.dims();
    let c = frame.channel_count();
    let mut out = header(if c == 3 { "P6" } else { "P5" }, w, h);
    out.reserve(h * w * c);
    for i in 0..h * w {
        for ch in frame.channels() {
            out.push(quantize(ch.data()[i]));
        }
    }
    out
}

pub fn encode_pgm_mask(mask: &Mask) -> Vec<u8> {
    let (h, w) = mask.dims();
    let mut out = header("P5", w, h);
    out.extend(mask.data().iter().map(|&v| if v == 1 { 255 } else { 0 }));
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'5' || bytes[1] == b'6') {
        return Err(Error::Format("not a binary PGM/PPM file".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed PNM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed PNM header".into()))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format("missing whitespace after maxval".into()));
    }
    if fields[2] != 255 {
        return Err(Error::Format(format!("maxval must be 255, got {}", fields[2])));
    }
    Ok(Header {
        magic: [bytes[0], bytes[1]],
        width: fields[0],
        height: fields[1],
        offset: pos + 1,
    })
}

/// Decodes P6 into a 3-channel frame or P5 into a 1-channel frame.
pub fn decode_pnm(bytes: &[u8]) -> Result<Frame> {
    let hdr = parse_header(bytes)?;
    let c = if hdr.magic[1] == b'6' { 3 } else { 1 };
    let n = hdr.width * hdr.height;
    let payload = &bytes[hdr.offset..];
    if payload.len() < n * c {
        return Err(Error::Length(format!(
            "PNM payload has {} bytes, expected {}",
            payload.len(),
            n * c
        )));
    }
    let channels = (0..c)
        .map(|ch| {
            let data = (0..n).map(|i| payload[i * c + ch] as f64 / 255.0).collect();
            Raster::new(hdr.height, hdr.width, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Frame::new(channels)
}

/// Decodes a P5 mask; any nonzero byte is a set pixel.
pub fn decode_pgm_mask(bytes: &[u8]) -> Result<Mask> {
    let hdr = parse_header(bytes)?;
    if hdr.magic[1] != b'5' {
        return Err(Error::Format("masks must be P5".into()));
    }
    let n = hdr.width * hdr.height;
    let payload = &bytes[hdr.offset..];
    if payload.len() < n {
        return Err(Error::Length(format!(
            "PGM payload has {} bytes, expected {n}",
            payload.len()
        )));
    }
    Mask::new(
        hdr.height,
        hdr.width,
        payload[..n].iter().map(|&b| u8::from(b != 0)).collect(),
    )
}
