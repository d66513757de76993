//! One function per subcommand. Each writes its artifacts and returns their
//! paths; every artifact carries the config echo, version and seed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use morphwalk::ballwalk::{run_chain_indexed, warm_start_m, write_samples_csv, ChainTrajectory, StartRule};
use morphwalk::diagnostics::{
    embedding_iso_transfer_with, ergodic_flow_estimate, halfspace_family, image_samples, iso_check_with_diameter, mixing_curve,
    s_conductance_scan, warm_start_hs, ExactChain, IsoResult, MixReport, TransferResult,
};
use morphwalk::flow::{
    bilipschitz_check, jacobian_dets, jacobian_report, read_archive, round_trip_error, write_archive, TransportMap,
};
use morphwalk::geometry::{diameter_estimate, Domain, Partition};
use morphwalk::rng::{stream, Purpose};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::{CliError, VERSION};

pub struct Context {
    pub cfg: ExperimentConfig,
    /// Config file text, echoed verbatim.
    pub text: String,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?))
}

/// Path of a secondary artifact next to `out`.
fn sibling(out: &Path, ext: &str) -> PathBuf {
    if out.extension().is_some_and(|e| e == ext) {
        out.with_extension(format!("report.{ext}"))
    } else {
        out.with_extension(ext)
    }
}

impl Context {
    fn echo(&self) -> serde_json::Value {
        json!({
            "version": VERSION,
            "seed": self.cfg.seed,
            "chain_seed": self.cfg.chain_seed(),
            "config": self.cfg,
            "config_text": self.text,
        })
    }

    fn header_lines(&self) -> Vec<String> {
        vec![
            format!("version: {VERSION}"),
            format!("seed: {}", self.cfg.seed),
            format!("config: {}", serde_json::to_string(&self.cfg).unwrap_or_default()),
        ]
    }

    fn write_json<T: Serialize>(&self, path: &Path, command: &str, result: &T) -> Result<PathBuf, CliError> {
        let mut doc = self.echo();
        doc["command"] = json!(command);
        doc["result"] = serde_json::to_value(result).map_err(|e| CliError::Io(e.to_string()))?;
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| CliError::Io(e.to_string()))?;
        writeln!(w).and_then(|_| w.flush()).map_err(|e| io_err(path, e))?;
        Ok(path.to_path_buf())
    }

    fn csv_writer(&self, path: &Path) -> Result<BufWriter<File>, CliError> {
        let mut w = create(path)?;
        for line in self.header_lines() {
            writeln!(w, "# {line}").map_err(|e| io_err(path, e))?;
        }
        Ok(w)
    }

    fn domain_and_map(&self) -> Result<(Domain, Option<Arc<TransportMap>>), CliError> {
        if self.cfg.domain.kind == "flow_image" {
            let map = self.cfg.build_map()?;
            Ok((map.image(), Some(map)))
        } else {
            Ok((self.cfg.domain(None)?, None))
        }
    }

    pub fn flow_build(&self, out: &Path) -> Result<Vec<PathBuf>, CliError> {
        let map = self.cfg.build_map()?;
        let mut w = create(out)?;
        write_archive(&map, &self.header_lines(), &mut w).map_err(|e| io_err(out, e))?;
        w.flush().map_err(|e| io_err(out, e))?;
        let jac = jacobian_dets(&map);
        let bl = bilipschitz_check(&map, self.cfg.flow.pairs, self.cfg.seed)?;
        let rt = round_trip_error(&map, 1000, self.cfg.seed)?;
        let result = json!({
            "potential": map.config().potential.expr.to_string(),
            "steps": map.steps(),
            "h": map.config().h,
            "seeds": map.seeds().len(),
            "max_abs_det_dev": jac.max_abs_dev,
            "fd_max_abs_det_dev": jac.fd_max_abs_dev,
            "fd_count": jac.fd_count,
            "max_fd_gap": jac.max_fd_gap,
            "lipschitz_estimate": map.lipschitz_estimate(),
            "bilipschitz": bl,
            "round_trip_error": rt,
            "round_trip_tolerance": 10.0 * map.config().h,
            "steps_detail": map.records(),
        });
        let report = self.write_json(&sibling(out, "json"), "flow build", &result)?;
        Ok(vec![out.to_path_buf(), report])
    }

    pub fn flow_verify(&self, archive: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
        let f = File::open(archive).map_err(|e| io_err(archive, e))?;
        let a = read_archive(BufReader::new(f))?;
        let jac = jacobian_report(&a.seeds, a.final_positions(), a.final_jacobians());
        let identity_start = a.jacobians.first().is_some_and(|j0| j0.iter().all(|m| *m == [[1.0, 0.0], [0.0, 1.0]]));
        let tol = self.cfg.flow.det_tol;
        let pass = identity_start && jac.max_abs_dev <= tol;
        let result = json!({
            "archive": archive.display().to_string(),
            "archive_header": a.header,
            "steps": a.steps,
            "seeds": a.seeds.len(),
            "identity_at_t0": identity_start,
            "max_abs_det_dev": jac.max_abs_dev,
            "fd_max_abs_det_dev": jac.fd_max_abs_dev,
            "fd_count": jac.fd_count,
            "tolerance": tol,
            "pass": pass,
        });
        let path = self.write_json(out, "flow verify", &result)?;
        if !pass {
            return Err(CliError::Verdict(format!("max |det J - 1| = {:e} exceeds {tol:e}", jac.max_abs_dev)));
        }
        Ok(vec![path])
    }

    pub fn sample_run(&self, out: &Path) -> Result<Vec<PathBuf>, CliError> {
        let (domain, _map) = self.domain_and_map()?;
        let cfg = self.cfg.chain_config(&domain)?;
        let trajs: Vec<ChainTrajectory> = (0..self.cfg.chain.chains as u64)
            .into_par_iter()
            .map(|c| run_chain_indexed(&domain, &cfg, c))
            .collect::<Result<_, _>>()?;
        let mut w = self.csv_writer(out)?;
        write_samples_csv(&trajs, &mut w).map_err(|e| io_err(out, e))?;
        w.flush().map_err(|e| io_err(out, e))?;
        let rates: Vec<f64> = trajs.iter().map(|t| t.acceptance_rate).collect();
        let mean = rates.iter().sum::<f64>() / rates.len().max(1) as f64;
        let result = json!({
            "domain": domain.kind_name(),
            "chains": trajs.len(),
            "steps": cfg.steps,
            "mean_acceptance": mean,
            "acceptance": rates,
        });
        let summary = self.write_json(&sibling(out, "json"), "sample run", &result)?;
        Ok(vec![out.to_path_buf(), summary])
    }

    fn write_tv_csv(&self, path: &Path, rep: &MixReport) -> Result<PathBuf, CliError> {
        let mut w = self.csv_writer(path)?;
        let mut body = String::from("t,tv,ci_lo,ci_hi,acceptance,noise_floor\n");
        for p in &rep.curve {
            body.push_str(&format!("{},{},{},{},{},{}\n", p.t, p.tv, p.ci_lo, p.ci_hi, p.acceptance, rep.noise_floor));
        }
        w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(|e| io_err(path, e))?;
        Ok(path.to_path_buf())
    }

    fn mix(&self, domain: &Domain) -> Result<MixReport, CliError> {
        let cfg = self.cfg.chain_config(domain)?;
        Ok(mixing_curve(domain, &cfg, self.cfg.chain.chains, self.cfg.diagnostics.bins, &self.cfg.checkpoints())?)
    }

    pub fn diag_tv(&self, out: &Path) -> Result<Vec<PathBuf>, CliError> {
        let (domain, _map) = self.domain_and_map()?;
        let rep = self.mix(&domain)?;
        let json = self.write_json(out, "diag tv", &rep)?;
        let csv = self.write_tv_csv(&sibling(out, "csv"), &rep)?;
        Ok(vec![json, csv])
    }

    pub fn diag_flow(&self, out: &Path) -> Result<Vec<PathBuf>, CliError> {
        let (domain, _map) = self.domain_and_map()?;
        let d = &self.cfg.diagnostics;
        if d.axis >= domain.dim() {
            return Err(CliError::Config(format!("diagnostics.axis {} out of range", d.axis)));
        }
        let mut rows = Vec::new();
        for (k, &c) in d.offsets.iter().enumerate() {
            let axis = d.axis;
            let e = ergodic_flow_estimate(&domain, &move |x: &[f64]| x[axis] < c, self.cfg.chain.r, d.samples, self.cfg.seed + k as u64)?;
            rows.push(json!({ "set": format!("x{axis} < {c}"), "estimate": e }));
        }
        Ok(vec![self.write_json(out, "diag flow", &json!({ "r": self.cfg.chain.r, "sets": rows }))?])
    }

    fn scan(&self, domain: &Domain) -> Result<morphwalk::diagnostics::ConductanceScan, CliError> {
        let d = &self.cfg.diagnostics;
        if d.axis >= domain.dim() {
            return Err(CliError::Config(format!("diagnostics.axis {} out of range", d.axis)));
        }
        let fam = halfspace_family(d.axis, &d.offsets);
        Ok(s_conductance_scan(domain, self.cfg.chain.r, &fam, d.s, d.samples, self.cfg.seed)?)
    }

    pub fn diag_conductance(&self, out: &Path) -> Result<Vec<PathBuf>, CliError> {
        let (domain, _map) = self.domain_and_map()?;
        let scan = self.scan(&domain)?;
        Ok(vec![self.write_json(out, "diag conductance", &json!({ "kind": "upper bound on phi_s over the family", "scan": scan }))?])
    }

    fn iso_sweep(&self, domain: &Domain, map: Option<&Arc<TransportMap>>) -> Result<IsoSweep, CliError> {
        let d = &self.cfg.diagnostics;
        let n = d.samples.max(100);
        let mut g = stream(self.cfg.seed, Purpose::Partition, 0);
        let mut sweep = IsoSweep::default();
        match map {
            Some(m) => {
                let base = &m.config().base;
                let l = bilipschitz_check(m, 0, self.cfg.seed)?.l_est.exp();
                let samples = image_samples(m, n, self.cfg.seed)?;
                for i in 0..d.partitions {
                    let p = Partition::random_planes(&base.bounding_box(), &mut g);
                    let tr = embedding_iso_transfer_with(m, &p, &samples, self.cfg.seed + i as u64, l)?;
                    sweep.violations_raw += usize::from(!tr.satisfied_raw);
                    sweep.violations += usize::from(!tr.satisfied);
                    sweep.distance_transfer_failures += usize::from(!tr.distance_transfer_holds);
                    sweep.transfers.push(tr);
                }
                sweep.map_lipschitz = Some(l);
                sweep.applicable = true;
            }
            None => {
                sweep.applicable = domain.is_known_convex();
                if !(d.diameter_safety >= 1.0) {
                    return Err(CliError::Config("diagnostics.diameter_safety must be at least 1".into()));
                }
                let diameter = match domain.exact_diameter() {
                    Some(v) => v,
                    None => d.diameter_safety * diameter_estimate(domain, 20_000, self.cfg.seed)?,
                };
                sweep.diameter = diameter;
                for i in 0..d.partitions {
                    let p = Partition::random_planes(&domain.bounding_box(), &mut g);
                    let r = iso_check_with_diameter(domain, &p, n, self.cfg.seed + i as u64, diameter)?;
                    sweep.violations_raw += usize::from(!r.satisfied_raw);
                    sweep.violations += usize::from(!r.satisfied);
                    sweep.violations_quarter += usize::from(!r.satisfied_quarter);
                    sweep.checks.push(r);
                }
            }
        }
        sweep.partitions = d.partitions;
        sweep.pass = !sweep.applicable || sweep.violations == 0;
        Ok(sweep)
    }

    pub fn diag_iso(&self, out: &Path) -> Result<Vec<PathBuf>, CliError> {
        let (domain, map) = self.domain_and_map()?;
        let sweep = self.iso_sweep(&domain, map.as_ref())?;
        let path = self.write_json(out, "diag iso", &sweep)?;
        if !sweep.pass {
            return Err(CliError::Verdict(format!("{} of {} partitions violate the inequality beyond 3σ", sweep.violations, sweep.partitions)));
        }
        Ok(vec![path])
    }

    pub fn diag_oracle(&self, states: Option<usize>, out: &Path) -> Result<Vec<PathBuf>, CliError> {
        let d = &self.cfg.diagnostics;
        let chain = match d.oracle.as_str() {
            "path" => ExactChain::path(states.unwrap_or(d.states), d.r_steps, self.cfg.chain.lazy)?,
            "grid" => {
                let (c, r) = (d.cols.unwrap_or(3), d.rows.unwrap_or(3));
                ExactChain::grid(c, r, d.r_steps, self.cfg.chain.lazy)?
            }
            other => return Err(CliError::Config(format!("unknown diagnostics.oracle `{other}`"))),
        };
        let n = chain.len();
        let starts: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        let rep = chain.ls_check(&starts, d.t_max);
        let singletons: Vec<f64> = (0..n).map(|i| chain.ergodic_flow(1 << i)).collect();
        let phi_s: Vec<serde_json::Value> = chain
            .s_grid()
            .into_iter()
            .filter_map(|s| chain.phi_s(s).map(|(v, a)| json!({ "s": s, "phi_s": v, "argmin_mask": a })))
            .collect();
        let pass = rep.violations == 0;
        let result = json!({
            "kind": d.oracle,
            "states": n,
            "r_steps": d.r_steps,
            "lazy": chain.lazy,
            "points": chain.points,
            "transition": chain.p,
            "stationary": chain.stationary,
            "singleton_flow": singletons,
            "phi_s": phi_s,
            "ls_check": rep,
            "pass": pass,
        });
        let path = self.write_json(out, "diag oracle", &result)?;
        if !pass {
            return Err(CliError::Verdict(format!("{} Lovász–Simonovits violations", rep.violations)));
        }
        Ok(vec![path])
    }

    pub fn report(&self, out: &Path) -> Result<Vec<PathBuf>, CliError> {
        let (domain, map) = self.domain_and_map()?;
        let mut rep = self.mix(&domain)?;
        let scan = self.scan(&domain)?;
        let cfg = self.cfg.chain_config(&domain)?;
        // H_s from the warm-start constant; a point mass has no finite M
        let m = match &cfg.start {
            StartRule::Uniform => Some(morphwalk::geometry::Estimate { value: 1.0, stderr: 0.0 }),
            StartRule::Subregion(region) => Some(warm_start_m(&domain, region, self.cfg.diagnostics.samples.max(1000), self.cfg.seed)?),
            StartRule::Point(_) => None,
        };
        let s = self.cfg.diagnostics.s;
        let mut ls_note = "no finite warm-start constant for a point start".to_string();
        if let Some(m) = m {
            if s > 0.0 && s <= 0.5 {
                let hs = warm_start_hs(m.value.max(1.0), s)?;
                rep.attach_ls(hs, s, scan.upper_bound.value)?;
                ls_note = format!("H_s = (M-1)s with M = {:.4} ± {:.4}; Φ_s is the scan upper bound, so the curve is a plausibility check", m.value, m.stderr);
            } else {
                ls_note = format!("s = {s} outside (0, 1/2]");
            }
        }
        rep.conductance = Some(scan);
        let sweep = self.iso_sweep(&domain, map.as_ref())?;
        rep.iso = sweep.checks.clone();
        let result = json!({
            "mix": rep,
            "ls_note": ls_note,
            "iso_summary": {
                "partitions": sweep.partitions,
                "violations": sweep.violations,
                "violations_raw": sweep.violations_raw,
                "violations_quarter": sweep.violations_quarter,
                "applicable": sweep.applicable,
            },
            "transfers": sweep.transfers,
        });
        let json = self.write_json(out, "report", &result)?;
        let csv = self.write_tv_csv(&sibling(out, "csv"), &rep)?;
        Ok(vec![json, csv])
    }
}

#[derive(Debug, Default, Serialize)]
struct IsoSweep {
    partitions: usize,
    /// False for domains not known to be convex, where the inequality need
    /// not hold.
    applicable: bool,
    violations: usize,
    violations_raw: usize,
    /// Violations of the `1/(4D)` form.
    violations_quarter: usize,
    /// Diameter on the right-hand side: exact, or sampled times the safety
    /// factor. Zero for flow images, whose check uses the base domain.
    diameter: f64,
    distance_transfer_failures: usize,
    map_lipschitz: Option<f64>,
    pass: bool,
    checks: Vec<IsoResult>,
    transfers: Vec<TransferResult>,
}
