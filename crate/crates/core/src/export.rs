//! 8-bit grayscale cine export: animated GIF89a and per-frame binary PGM.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::phantom::Cine;
use crate::{Error, Result};

/// Linear map [0, 1] → [0, 255], clamped and rounded.
pub fn gray8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn frame_bytes(c: &Cine, t: usize) -> Vec<u8> {
    c.frame(t).iter().map(|&v| gray8(v)).collect()
}

pub fn write_pgm<W: Write>(mut w: W, pixels: &[u8], height: usize, width: usize) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::shape("pgm", format!("{} pixels for {height}×{width}", pixels.len())));
    }
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    w.flush()?;
    Ok(())
}

/// Animated, looping GIF with a 256-level gray palette; `delay_cs` is the
/// per-frame delay in hundredths of a second.
pub fn write_gif<W: Write>(mut w: W, c: &Cine, delay_cs: u16) -> Result<()> {
    let too_big = |d: usize| u16::try_from(d).map_err(|_| Error::invalid(format!("GIF extent {d} exceeds 65535")));
    let (width, height) = (too_big(c.w)?, too_big(c.h)?);
    w.write_all(b"GIF89a")?;
    w.write_all(&width.to_le_bytes())?;
    w.write_all(&height.to_le_bytes())?;
    // Global table present, 8-bit colour resolution, 256 entries.
    w.write_all(&[0xF7, 0, 0])?;
    for i in 0..=255u8 {
        w.write_all(&[i, i, i])?;
    }
    w.write_all(&[0x21, 0xFF, 0x0B])?;
    w.write_all(b"NETSCAPE2.0")?;
    w.write_all(&[0x03, 0x01, 0x00, 0x00, 0x00])?;
    for t in 0..c.t {
        w.write_all(&[0x21, 0xF9, 0x04, 0x04])?;
        w.write_all(&delay_cs.to_le_bytes())?;
        w.write_all(&[0x00, 0x00])?;
        w.write_all(&[0x2C, 0, 0, 0, 0])?;
        w.write_all(&width.to_le_bytes())?;
        w.write_all(&height.to_le_bytes())?;
        w.write_all(&[0x00, 8])?;
        let data = lzw_encode(&frame_bytes(c, t));
        for block in data.chunks(255) {
            w.write_all(&[block.len() as u8])?;
            w.write_all(block)?;
        }
        w.write_all(&[0x00])?;
    }
    w.write_all(&[0x3B])?;
    w.flush()?;
    Ok(())
}

struct BitWriter {
    out: Vec<u8>,
    acc: u32,
    bits: u32,
}

impl BitWriter {
    fn put(&mut self, code: u16, size: u32) {
        self.acc |= u32::from(code) << self.bits;
        self.bits += size;
        while self.bits >= 8 {
            self.out.push(self.acc as u8);
            self.acc >>= 8;
            self.bits -= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.bits > 0 {
            self.out.push(self.acc as u8);
        }
        self.out
    }
}

/// Variable-width LZW with 8-bit literals, as GIF image data requires.
pub fn lzw_encode(pixels: &[u8]) -> Vec<u8> {
    const CLEAR: u16 = 256;
    const EOI: u16 = 257;
    const MAX_CODE: u16 = 4096;
    let mut bw = BitWriter { out: Vec::new(), acc: 0, bits: 0 };
    let mut dict: HashMap<(u16, u8), u16> = HashMap::new();
    let mut size = 9;
    let mut next = EOI + 1;
    bw.put(CLEAR, size);
    let Some((&first, rest)) = pixels.split_first() else {
        bw.put(EOI, size);
        return bw.finish();
    };
    let mut cur = u16::from(first);
    // Emits a code, then widens once the next free code no longer fits.
    let emit = |bw: &mut BitWriter, code: u16, size: &mut u32, next: u16| {
        bw.put(code, *size);
        if next >= (1 << *size) && *size < 12 {
            *size += 1;
        }
    };
    for &b in rest {
        if let Some(&code) = dict.get(&(cur, b)) {
            cur = code;
            continue;
        }
        emit(&mut bw, cur, &mut size, next);
        if next < MAX_CODE {
            dict.insert((cur, b), next);
            next += 1;
        } else {
            bw.put(CLEAR, size);
            dict.clear();
            size = 9;
            next = EOI + 1;
        }
        cur = u16::from(b);
    }
    emit(&mut bw, cur, &mut size, next);
    bw.put(EOI, size);
    bw.finish()
}

/// Writes `<stem>.gif` and `<stem>_fNN.pgm` per frame into `dir`.
pub fn export_cine(dir: &Path, stem: &str, c: &Cine) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(c.t + 1);
    let gif = dir.join(format!("{stem}.gif"));
    write_gif(BufWriter::new(File::create(&gif)?), c, 8)?;
    written.push(gif);
    for t in 0..c.t {
        let p = dir.join(format!("{stem}_f{t:02}.pgm"));
        write_pgm(BufWriter::new(File::create(&p)?), &frame_bytes(c, t), c.h, c.w)?;
        written.push(p);
    }
    Ok(written)
}
