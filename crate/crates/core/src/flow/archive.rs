//! Plain-text map archive.
//!
//! ```text
//! # free-form header lines (config echo, version)
//! @meta
//! steps=<T>
//! h=<h>
//! seed_spacing=<s>
//! lipschitz=<L>
//! @boundary <k>
//! x,y
//! ...
//! @seeds
//! seed,i,j,k,x,y,j11,j12,j21,j22
//! ...
//! ```

use std::io::{BufRead, Write};

use super::{Mat2, SeedLattice, TransportMap};
use crate::error::{Error, Result};
use crate::geometry::P2;

/// Contents of an archive, enough to re-run the Jacobian checks.
#[derive(Debug, Clone, PartialEq)]
pub struct MapArchive {
    pub header: Vec<String>,
    pub steps: usize,
    pub h: f64,
    pub lipschitz: f64,
    pub seeds: SeedLattice,
    pub boundaries: Vec<Vec<P2>>,
    /// `positions[k][s]`.
    pub positions: Vec<Vec<P2>>,
    pub jacobians: Vec<Vec<Mat2>>,
}

impl MapArchive {
    pub fn final_positions(&self) -> &[P2] {
        self.positions.last().map(|v| &v[..]).unwrap_or(&[])
    }

    pub fn final_jacobians(&self) -> &[Mat2] {
        self.jacobians.last().map(|v| &v[..]).unwrap_or(&[])
    }
}

pub fn write_archive<W: Write>(map: &TransportMap, header: &[String], mut w: W) -> std::io::Result<()> {
    for line in header {
        writeln!(w, "# {line}")?;
    }
    let cfg = map.config();
    writeln!(w, "@meta")?;
    writeln!(w, "steps={}", cfg.steps)?;
    writeln!(w, "h={}", cfg.h)?;
    writeln!(w, "seed_spacing={}", map.seeds().spacing)?;
    writeln!(w, "lipschitz={}", map.lipschitz_estimate())?;
    for (k, b) in map.boundaries().iter().enumerate() {
        writeln!(w, "@boundary {k}")?;
        writeln!(w, "x,y")?;
        for p in b.vertices() {
            writeln!(w, "{},{}", p[0], p[1])?;
        }
    }
    writeln!(w, "@seeds")?;
    writeln!(w, "seed,i,j,k,x,y,j11,j12,j21,j22")?;
    for s in 0..map.seeds().len() {
        let ij = map.seeds().index[s];
        for k in 0..=cfg.steps {
            let p = map.positions(k)[s];
            let j = map.jacobians(k)[s];
            writeln!(
                w,
                "{s},{},{},{k},{},{},{},{},{},{}",
                ij[0], ij[1], p[0], p[1], j[0][0], j[0][1], j[1][0], j[1][1]
            )?;
        }
    }
    Ok(())
}

fn bad(line: usize, msg: &str) -> Error {
    Error::input(format!("archive line {line}: {msg}"))
}

fn num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.trim().parse().map_err(|_| bad(line, &format!("cannot parse `{s}`")))
}

pub fn read_archive<R: BufRead>(r: R) -> Result<MapArchive> {
    enum Section {
        None,
        Meta,
        Boundary,
        Seeds,
    }
    let mut a = MapArchive {
        header: Vec::new(),
        steps: 0,
        h: 0.0,
        lipschitz: 0.0,
        seeds: SeedLattice { spacing: 0.0, index: Vec::new() },
        boundaries: Vec::new(),
        positions: Vec::new(),
        jacobians: Vec::new(),
    };
    let mut section = Section::None;
    for (n, line) in r.lines().enumerate() {
        let n = n + 1;
        let line = line.map_err(|e| Error::input(format!("archive read failed: {e}")))?;
        if let Some(rest) = line.strip_prefix('#') {
            a.header.push(rest.trim_start().to_string());
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if line == "@meta" {
            section = Section::Meta;
            continue;
        }
        if line.starts_with("@boundary") {
            a.boundaries.push(Vec::new());
            section = Section::Boundary;
            continue;
        }
        if line == "@seeds" {
            if a.steps == 0 {
                return Err(bad(n, "seed section before metadata"));
            }
            a.positions = vec![Vec::new(); a.steps + 1];
            a.jacobians = vec![Vec::new(); a.steps + 1];
            section = Section::Seeds;
            continue;
        }
        match section {
            Section::None => return Err(bad(n, "content outside a section")),
            Section::Meta => {
                let (k, v) = line.split_once('=').ok_or_else(|| bad(n, "expected key=value"))?;
                match k {
                    "steps" => a.steps = num(v, n)?,
                    "h" => a.h = num(v, n)?,
                    "seed_spacing" => a.seeds.spacing = num(v, n)?,
                    "lipschitz" => a.lipschitz = num(v, n)?,
                    _ => return Err(bad(n, &format!("unknown key `{k}`"))),
                }
            }
            Section::Boundary => {
                if line == "x,y" {
                    continue;
                }
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 2 {
                    return Err(bad(n, "expected x,y"));
                }
                let p = [num(f[0], n)?, num(f[1], n)?];
                a.boundaries.last_mut().expect("section opened").push(p);
            }
            Section::Seeds => {
                if line.starts_with("seed,") {
                    continue;
                }
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 10 {
                    return Err(bad(n, "expected 10 seed fields"));
                }
                let s: usize = num(f[0], n)?;
                let k: usize = num(f[3], n)?;
                if k > a.steps {
                    return Err(bad(n, "step index out of range"));
                }
                if k == 0 {
                    if s != a.seeds.index.len() {
                        return Err(bad(n, "seed records out of order"));
                    }
                    a.seeds.index.push([num(f[1], n)?, num(f[2], n)?]);
                }
                if a.positions[k].len() != s {
                    return Err(bad(n, "seed records out of order"));
                }
                a.positions[k].push([num(f[4], n)?, num(f[5], n)?]);
                a.jacobians[k].push([[num(f[6], n)?, num(f[7], n)?], [num(f[8], n)?, num(f[9], n)?]]);
            }
        }
    }
    if a.steps == 0 || a.positions.is_empty() {
        return Err(Error::input("archive has no seed records"));
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{build_map, jacobian_dets, jacobian_report, FlowConfig};
    use crate::geometry::Domain;
    use crate::potential::PotentialSpec;

    #[test]
    fn round_trip() {
        let mut cfg = FlowConfig::new(Domain::unit_disk(), PotentialSpec::parse("x*y").unwrap(), 10, 0.05);
        cfg.seed_spacing = 0.2;
        let map = build_map(cfg).unwrap();
        let mut buf = Vec::new();
        write_archive(&map, &["config: test".to_string()], &mut buf).unwrap();
        let a = read_archive(&buf[..]).unwrap();
        assert_eq!(a.header, vec!["config: test".to_string()]);
        assert_eq!(a.steps, 10);
        assert_eq!(a.seeds, *map.seeds());
        assert_eq!(a.final_positions(), map.final_positions());
        assert_eq!(a.boundaries.len(), 11);
        assert_eq!(jacobian_report(&a.seeds, a.final_positions(), a.final_jacobians()), jacobian_dets(&map));
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_archive("hello\n".as_bytes()).is_err());
        assert!(read_archive("@meta\nsteps=x\n".as_bytes()).is_err());
        assert!(read_archive("@meta\nwhat=1\n".as_bytes()).is_err());
    }
}
