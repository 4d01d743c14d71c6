//! Event stream ingestion: CSV parsing, fixed-interval slicing and dense
//! frame / voxel encodings.

use std::io::{BufRead, Read, Write};

use crate::error::{param_err, Error, Result};
use crate::nn::Tensor;

/// Default slicing window in microseconds.
pub const DEFAULT_SLICE_INTERVAL_US: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub x: u32,
    pub y: u32,
    /// Microseconds.
    pub t: u64,
    /// −1 or +1.
    pub p: i8,
}

/// Events falling in the half-open window `[t_start, t_end)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventSlice {
    pub events: Vec<Event>,
    pub t_start: u64,
    pub t_end: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    Frame,
    Voxel,
}

impl Encoding {
    pub fn tag(self) -> i32 {
        match self {
            Encoding::Frame => 0,
            Encoding::Voxel => 1,
        }
    }

    pub fn from_tag(tag: i32) -> Option<Self> {
        match tag {
            0 => Some(Encoding::Frame),
            1 => Some(Encoding::Voxel),
            _ => None,
        }
    }
}

/// Dense `(C, H, W)` count grid. Frames use `C = 2` (positive, negative),
/// voxels `C = 2·B` laid out as `polarity · B + bin`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventTensor {
    pub data: Tensor,
    pub encoding: Encoding,
}

impl EventTensor {
    pub fn channels(&self) -> usize {
        self.data.dim(0)
    }

    pub fn height(&self) -> usize {
        self.data.dim(1)
    }

    pub fn width(&self) -> usize {
        self.data.dim(2)
    }

    /// Writes the `(C, H, W, tag)` i32 header followed by little-endian f32 data.
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        for v in [
            self.channels() as i32,
            self.height() as i32,
            self.width() as i32,
            self.encoding.tag(),
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in self.data.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let mut header = [0i32; 4];
        for h in header.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *h = i32::from_le_bytes(b);
        }
        let [c, h, w, tag] = header;
        let encoding = Encoding::from_tag(tag).ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("unknown encoding tag {tag}"),
        })?;
        if c <= 0 || h <= 0 || w <= 0 {
            return Err(Error::Parse {
                line: 0,
                msg: format!("bad tensor header {header:?}"),
            });
        }
        let n = (c * h * w) as usize;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b) as f64);
        }
        Ok(EventTensor {
            data: Tensor::from_vec(&[c as usize, h as usize, w as usize], data)?,
            encoding,
        })
    }
}

/// Parses `x,y,t,p` lines. Blank lines and lines starting with `#` are skipped.
pub fn parse_events(source: impl BufRead, width: usize, height: usize) -> Result<Vec<Event>> {
    if width == 0 || height == 0 {
        return param_err("sensor width and height must be positive");
    }
    let mut events = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<i64> {
            s.parse::<i64>().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("{what}: {e}"),
            })
        };
        let (x, y, t, p) = (
            num(fields[0], "x")?,
            num(fields[1], "y")?,
            num(fields[2], "t")?,
            num(fields[3], "p")?,
        );
        if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
            return Err(Error::Bounds {
                line: lineno,
                x,
                y,
                width,
                height,
            });
        }
        if t < 0 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("negative timestamp {t}"),
            });
        }
        if p != 1 && p != -1 {
            return Err(Error::Polarity {
                line: lineno,
                value: p,
            });
        }
        events.push(Event {
            x: x as u32,
            y: y as u32,
            t: t as u64,
            p: p as i8,
        });
    }
    Ok(events)
}

pub fn write_events(events: &[Event], mut w: impl Write) -> Result<()> {
    for e in events {
        writeln!(w, "{},{},{},{}", e.x, e.y, e.t, e.p)?;
    }
    Ok(())
}

/// Splits a time-sorted stream into windows `[i·interval, (i+1)·interval)`
/// from `t = 0` through the window holding the last event. Empty
/// intermediate windows are kept so slice `i` always covers window `i`.
pub fn slice_stream(events: &[Event], interval: u64) -> Result<Vec<EventSlice>> {
    if interval == 0 {
        return param_err("slice interval must be positive");
    }
    if let Some(i) = events.windows(2).position(|w| w[0].t > w[1].t) {
        return Err(Error::Ordering {
            index: i + 1,
            prev: events[i].t,
            next: events[i + 1].t,
        });
    }
    let Some(last) = events.last() else {
        return Ok(Vec::new());
    };
    let n = (last.t / interval + 1) as usize;
    let mut slices: Vec<EventSlice> = (0..n as u64)
        .map(|i| EventSlice {
            events: Vec::new(),
            t_start: i * interval,
            t_end: (i + 1) * interval,
        })
        .collect();
    for e in events {
        slices[(e.t / interval) as usize].events.push(*e);
    }
    Ok(slices)
}

fn check_bounds(slice: &EventSlice, height: usize, width: usize) -> Result<()> {
    if let Some(e) = slice
        .events
        .iter()
        .find(|e| e.x as usize >= width || e.y as usize >= height)
    {
        return Err(Error::Bounds {
            line: 0,
            x: e.x as i64,
            y: e.y as i64,
            width,
            height,
        });
    }
    Ok(())
}

/// Per-pixel polarity counts: channel 0 for `p = +1`, channel 1 for `p = −1`.
pub fn encode_frame(slice: &EventSlice, height: usize, width: usize) -> Result<EventTensor> {
    let mut t = encode_voxel(slice, height, width, 1)?;
    t.encoding = Encoding::Frame;
    Ok(t)
}

/// Polarity counts further split into `bins` equal sub-windows of the slice.
pub fn encode_voxel(
    slice: &EventSlice,
    height: usize,
    width: usize,
    bins: usize,
) -> Result<EventTensor> {
    if bins == 0 {
        return param_err("voxel encoding needs at least one bin");
    }
    check_bounds(slice, height, width)?;
    let span = slice.t_end.saturating_sub(slice.t_start).max(1);
    let mut data = Tensor::zeros(&[2 * bins, height, width]);
    let plane = height * width;
    for e in &slice.events {
        let rel = e.t.saturating_sub(slice.t_start);
        let bin = ((rel as u128 * bins as u128 / span as u128) as usize).min(bins - 1);
        let pol = if e.p > 0 { 0 } else { 1 };
        let ch = pol * bins + bin;
        data.data_mut()[ch * plane + e.y as usize * width + e.x as usize] += 1.0;
    }
    Ok(EventTensor {
        data,
        encoding: Encoding::Voxel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(x: u32, y: u32, t: u64, p: i8) -> Event {
        Event { x, y, t, p }
    }

    #[test]
    fn parses_line() {
        let evs = parse_events("3,2,1000,1\n".as_bytes(), 8, 8).unwrap();
        assert_eq!(evs, vec![ev(3, 2, 1000, 1)]);
        assert!(parse_events("".as_bytes(), 8, 8).unwrap().is_empty());
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_events("3,2,1000,0\n".as_bytes(), 8, 8),
            Err(Error::Polarity { line: 1, value: 0 })
        ));
        assert!(matches!(
            parse_events("1,1,0,1\n8,2,5,1\n".as_bytes(), 8, 8),
            Err(Error::Bounds { line: 2, .. })
        ));
        assert!(matches!(
            parse_events("1,1,0\n".as_bytes(), 8, 8),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_events("1,a,0,1\n".as_bytes(), 8, 8),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn slicing_examples() {
        let s = slice_stream(&[ev(0, 0, 0, 1), ev(0, 0, 5000, 1), ev(0, 0, 9999, 1)], 10_000)
            .unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].events.len(), 3);

        let s = slice_stream(&[ev(0, 0, 0, 1), ev(0, 0, 10_000, -1)], 10_000).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].events, vec![ev(0, 0, 10_000, -1)]);
        assert_eq!((s[1].t_start, s[1].t_end), (10_000, 20_000));

        assert!(slice_stream(&[], 10_000).unwrap().is_empty());
        assert!(matches!(
            slice_stream(&[ev(0, 0, 5, 1), ev(0, 0, 4, 1)], 10),
            Err(Error::Ordering { index: 1, .. })
        ));
        assert!(slice_stream(&[], 0).is_err());
    }

    fn slice_of(events: Vec<Event>) -> EventSlice {
        EventSlice {
            events,
            t_start: 0,
            t_end: 100,
        }
    }

    #[test]
    fn frame_examples() {
        let f = encode_frame(&slice_of(vec![ev(3, 2, 0, 1), ev(3, 2, 1, 1)]), 4, 5).unwrap();
        assert_eq!(f.data.get(&[0, 2, 3]), 2.0);
        assert_eq!(f.data.sum(), 2.0);

        let f = encode_frame(&slice_of(vec![]), 4, 5).unwrap();
        assert_eq!(f.data, Tensor::zeros(&[2, 4, 5]));

        let f = encode_frame(&slice_of(vec![ev(1, 1, 0, 1), ev(1, 1, 3, -1)]), 4, 5).unwrap();
        assert_eq!(f.data.get(&[0, 1, 1]), 1.0);
        assert_eq!(f.data.get(&[1, 1, 1]), 1.0);
        assert_eq!(f.encoding, Encoding::Frame);

        assert!(encode_frame(&slice_of(vec![ev(5, 0, 0, 1)]), 4, 5).is_err());
    }

    #[test]
    fn voxel_examples() {
        let s = slice_of(vec![ev(0, 0, 0, 1), ev(1, 0, 20, -1), ev(2, 0, 60, 1), ev(3, 0, 80, 1)]);
        let one = encode_voxel(&s, 2, 4, 1).unwrap();
        assert_eq!(one.data, encode_frame(&s, 2, 4).unwrap().data);

        let two = encode_voxel(&s, 2, 4, 2).unwrap();
        let plane = 8;
        let bin_mass = |b: usize| -> f64 {
            [b, 2 + b]
                .iter()
                .map(|ch| two.data.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>())
                .sum()
        };
        assert_eq!((bin_mass(0), bin_mass(1)), (2.0, 2.0));
        // t = t_start lands in bin 0
        assert_eq!(two.data.get(&[0, 0, 0]), 1.0);
        assert!(encode_voxel(&s, 2, 4, 0).is_err());
    }

    #[test]
    fn binary_roundtrip() {
        let s = slice_of(vec![ev(1, 1, 0, 1), ev(0, 1, 3, -1)]);
        let t = encode_voxel(&s, 2, 3, 3).unwrap();
        let mut buf = Vec::new();
        t.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 4 * 6 * 2 * 3);
        assert_eq!(&buf[..4], &6i32.to_le_bytes());
        assert_eq!(&buf[12..16], &1i32.to_le_bytes());
        assert_eq!(EventTensor::read_binary(&buf[..]).unwrap(), t);
    }
}
