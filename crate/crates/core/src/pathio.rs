//! Path dumps: one record `(replica, t, x_1..x_d)` per time step.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! magic   8 bytes  "RWREPTH1"
//! dim     u32
//! records { replica: u64, t: u64, x: [i32; dim] }*
//! ```

use std::io::{Read, Write};

use crate::error::{usage, Result};
use crate::walk::WalkPath;

pub const MAGIC: &[u8; 8] = b"RWREPTH1";

fn check_dims<'a>(paths: &[(u64, &'a WalkPath)]) -> Result<usize> {
    let dim = paths.first().map_or(0, |p| p.1.dim());
    if paths.iter().any(|p| p.1.dim() != dim) {
        return usage("paths in one dump must share a dimension");
    }
    Ok(dim)
}

/// Comma-separated dump with a `replica,t,x1,..,xd` header.
pub fn write_text<W: Write>(out: W, paths: &[(u64, &WalkPath)]) -> Result<()> {
    let dim = check_dims(paths)?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["replica".to_string(), "t".to_string()];
    header.extend((1..=dim).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (replica, path) in paths {
        for (t, x) in path.positions().enumerate() {
            let mut row = vec![replica.to_string(), t.to_string()];
            row.extend(x.iter().map(i32::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_binary<W: Write>(mut out: W, paths: &[(u64, &WalkPath)]) -> Result<()> {
    let dim = check_dims(paths)?;
    out.write_all(MAGIC)?;
    out.write_all(&(dim as u32).to_le_bytes())?;
    for (replica, path) in paths {
        for (t, x) in path.positions().enumerate() {
            out.write_all(&replica.to_le_bytes())?;
            out.write_all(&(t as u64).to_le_bytes())?;
            for c in x {
                out.write_all(&c.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Read a binary dump back into `(replica, path)` pairs. Records of one
/// replica must be contiguous with `t = 0, 1, ...`.
pub fn read_binary<R: Read>(mut input: R) -> Result<Vec<(u64, WalkPath)>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return usage("not a path dump (bad magic)");
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rec = 16 + 4 * dim;
    let body = &bytes[12..];
    if dim == 0 || body.len() % rec != 0 {
        return usage("truncated path dump");
    }
    let mut out: Vec<(u64, Vec<Vec<i32>>)> = Vec::new();
    for r in body.chunks_exact(rec) {
        let replica = u64::from_le_bytes(r[..8].try_into().unwrap());
        let t = u64::from_le_bytes(r[8..16].try_into().unwrap());
        let x: Vec<i32> = r[16..].chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect();
        match out.last_mut() {
            Some((id, sites)) if *id == replica && t == sites.len() as u64 => sites.push(x),
            _ if t == 0 => out.push((replica, vec![x])),
            _ => return usage(format!("record out of order: replica {replica}, t {t}")),
        }
    }
    out.into_iter()
        .map(|(id, sites)| Ok((id, WalkPath::from_sites(&sites)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_layout() {
        let p = WalkPath::from_directions(&[0, -1], &[0, 3]);
        let mut buf = Vec::new();
        write_binary(&mut buf, &[(7, &p)]).unwrap();
        assert_eq!(buf.len(), 12 + 3 * 24);
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(&buf[8..12], &[2, 0, 0, 0]);
        // second record: replica 7, t 1, x = (1, -1)
        let r = &buf[12 + 24..12 + 48];
        assert_eq!(r[0], 7);
        assert_eq!(r[8], 1);
        assert_eq!(&r[16..24], &[1, 0, 0, 0, 0xff, 0xff, 0xff, 0xff]);
        let back = read_binary(&buf[..]).unwrap();
        assert_eq!(back, vec![(7, p)]);
    }

    #[test]
    fn bad_dumps_are_rejected() {
        assert!(read_binary(&b"NOTADUMP\x02\0\0\0"[..]).is_err());
        let p = WalkPath::from_directions(&[0, 0], &[0]);
        let mut buf = Vec::new();
        write_binary(&mut buf, &[(1, &p)]).unwrap();
        buf.pop();
        assert!(read_binary(&buf[..]).is_err());
    }

    #[test]
    fn text_layout() {
        let p = WalkPath::from_directions(&[0, 0], &[2]);
        let mut buf = Vec::new();
        write_text(&mut buf, &[(3, &p)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "replica,t,x1,x2\n3,0,0,0\n3,1,0,1\n");
    }
}
