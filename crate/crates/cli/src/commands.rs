use crate::{
    bad_input, connectivity, environment, internal, CliError, DriveArgs, DriverOpts, Format,
    GapArgs, GenOvalArgs, LapsArgs, LocalizeArgs, Mode, ReduceArgs, RmseArgs, SimRunArgs,
    TwinBuildArgs,
};
use racesim::bridge::{serve, ServeConfig, SessionEnd};
use racesim::config::RunConfig;
use racesim::driver::{run_driver, Driver, DriverError, PoseSource};
use racesim::eval::{
    align_estimates, estimates_from_jsonl, estimates_to_jsonl, gap_delta, lap_metrics,
    mean_metrics, pose_rmse, reduction, EstimateRecord, LapMetrics, ReferenceTrajectory, RunLog,
};
use racesim::geometry::{wrap_angle, Pose2};
use racesim::localize::{match_scan, rasterize, OccupancyGrid};
use racesim::scenario::{gen_oval as make_oval, OvalParams};
use racesim::sensors::Scan;
use racesim::twin::{build_twin, load_pointcloud, CloudFormat, TrackMap2D};
use racesim::world::World;
use std::io::{ErrorKind, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

type Result<T> = std::result::Result<T, CliError>;

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| bad_input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| environment(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| environment(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).map_err(bad_input)
}

fn load_map(path: &Path) -> Result<TrackMap2D> {
    TrackMap2D::from_json(&read(path)?).map_err(|e| bad_input(format!("{}: {e}", path.display())))
}

fn load_reference(path: &Path, closed: bool) -> Result<ReferenceTrajectory> {
    ReferenceTrajectory::from_csv(&read(path)?, closed)
        .map_err(|e| bad_input(format!("{}: {e}", path.display())))
}

fn load_log(path: &Path) -> Result<RunLog> {
    RunLog::from_jsonl(&read(path)?).map_err(|e| bad_input(format!("{}: {e}", path.display())))
}

/// Reads a grid JSON, or rasterizes a track map JSON at `resolution`.
fn load_grid(path: &Path, resolution: f64) -> Result<OccupancyGrid> {
    let text = read(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| bad_input(format!("{}: {e}", path.display())))?;
    if value.get("cells").is_some() {
        OccupancyGrid::from_json(&text).map_err(|e| bad_input(format!("{}: {e}", path.display())))
    } else {
        rasterize(&load_map(path)?, resolution).map_err(|e| bad_input(format!("{}: {e}", path.display())))
    }
}

fn cloud_format(path: &Path, format: Option<Format>) -> Result<CloudFormat> {
    match format {
        Some(Format::Ply) => Ok(CloudFormat::AsciiPly),
        Some(Format::Xyz) => Ok(CloudFormat::XyzText),
        None => CloudFormat::from_path(path).ok_or_else(|| {
            bad_input(format!("{}: cannot infer the cloud format; pass --format", path.display()))
        }),
    }
}

pub fn twin_build(a: TwinBuildArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let format = cloud_format(&a.input, a.format)?;
    let cloud = load_pointcloud(&a.input, format).map_err(bad_input)?;
    let out = build_twin(&cloud, &cfg.twin).map_err(bad_input)?;
    write(&a.out_dir.join("mesh.json"), &out.mesh.to_json())?;
    write(&a.out_dir.join("map.json"), &out.map.to_json())?;
    let report = serde_json::to_string_pretty(&out.report).map_err(internal)?;
    write(&a.out_dir.join("report.json"), &(report + "\n"))?;
    if out.map.is_empty() {
        log::warn!("the slice produced no segments; grid.json not written");
    } else {
        let grid = rasterize(&out.map, cfg.localize.resolution).map_err(internal)?;
        write(&a.out_dir.join("grid.json"), &grid.to_json())?;
    }
    println!("{:<20} {:>10} {:>10} {:>10}", "stage", "points", "faces", "segments");
    for r in &out.report {
        let opt = |v: Option<usize>| v.map_or("-".to_string(), |n| n.to_string());
        println!("{:<20} {:>10} {:>10} {:>10}", r.stage, r.points, opt(r.faces), opt(r.segments));
    }
    Ok(())
}

fn build_driver(cfg: &RunConfig, opts: &DriverOpts) -> Result<Driver> {
    let ref_path = opts
        .reference
        .clone()
        .or_else(|| cfg.reference.clone())
        .ok_or_else(|| bad_input("no reference trajectory; pass --reference or set `reference`"))?;
    let reference = load_reference(&ref_path, cfg.reference_closed)?;
    let mut pursuit = cfg.driver.pursuit;
    if let Some(v) = opts.speed {
        pursuit.target_speed = v;
    }
    let source = match opts.mode {
        Mode::Gt => PoseSource::GroundTruth,
        Mode::Se => {
            let map_path = opts
                .localize_map
                .clone()
                .or_else(|| cfg.map.clone())
                .ok_or_else(|| bad_input("scan matching needs a map; pass --localize-map"))?;
            PoseSource::ScanMatch {
                grid: load_grid(&map_path, cfg.localize.resolution)?,
                window: cfg.driver.window,
                lidar: cfg.lidar_spec().map_err(bad_input)?,
            }
        }
    };
    Ok(Driver::new(pursuit, reference, source, cfg.start))
}

fn driver_error(e: DriverError) -> CliError {
    match e {
        DriverError::NoGroundTruth(_) => bad_input(e),
        DriverError::Bridge(_) => connectivity(e),
    }
}

fn write_estimates(path: &Option<PathBuf>, records: &[EstimateRecord]) -> Result<()> {
    match path {
        Some(p) => write(p, &estimates_to_jsonl(records)),
        None => Ok(()),
    }
}

pub fn sim_run(a: SimRunArgs, ci: bool) -> Result<()> {
    if ci && a.seed.is_none() {
        return Err(bad_input("--seed is required with --ci"));
    }
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.drive && a.driver.mode == Mode::Gt {
        cfg.expose_ground_truth = true;
    }
    let map_path = a
        .map
        .clone()
        .or_else(|| cfg.map.clone())
        .ok_or_else(|| bad_input("no track map; pass --map or set `map`"))?;
    let map = load_map(&map_path)?;
    let world = World::new(
        cfg.world_config().map_err(bad_input)?,
        &map,
        cfg.start,
        cfg.load_opponents().map_err(bad_input)?,
    );
    let max_ticks = match (a.ticks, a.duration) {
        (Some(n), _) => Some(n),
        (None, Some(t)) if t > 0.0 => Some((t / cfg.dt).round() as u64),
        (None, Some(t)) => return Err(bad_input(format!("duration must be positive, got {t}"))),
        (None, None) => None,
    };
    let serve_cfg = ServeConfig {
        timeout: a.timeout_ms.map(Duration::from_millis),
        on_timeout: a.on_timeout,
        max_ticks,
        wall_clock: cfg.wall_clock,
        log_scans: a.log_scans,
    };
    let listener = TcpListener::bind((a.bind.as_str(), a.port)).map_err(|e| match e.kind() {
        ErrorKind::AddrInUse | ErrorKind::PermissionDenied | ErrorKind::AddrNotAvailable => {
            environment(format!("cannot listen on {}:{}: {e}", a.bind, a.port))
        }
        _ => bad_input(format!("cannot listen on {}:{}: {e}", a.bind, a.port)),
    })?;
    let addr = listener.local_addr().map_err(environment)?;
    eprintln!("listening on {addr}");
    let _ = std::io::stderr().flush();
    let client = if a.drive {
        let driver = build_driver(&cfg, &a.driver)?;
        Some(std::thread::spawn(move || run_driver(addr, driver, |_| None)))
    } else {
        None
    };
    let report = serve(&listener, world, &serve_cfg).map_err(connectivity)?;
    write(&a.log, &report.log.to_jsonl())?;
    if let Some(h) = client {
        let drive = h.join().map_err(|_| internal("driver thread panicked"))?;
        let drive = drive.map_err(driver_error)?;
        write_estimates(&a.driver.estimates, &drive.estimates)?;
    }
    println!(
        "ticks {} timeouts {} end {:?} digest {}",
        report.log.records.len(),
        report.timeouts,
        report.end,
        report.log.digest()
    );
    match report.end {
        SessionEnd::Completed | SessionEnd::Disconnected => Ok(()),
        SessionEnd::ProtocolError(m) => Err(connectivity(format!("protocol error: {m}"))),
        SessionEnd::TimeoutAbort { tick } => Err(connectivity(format!("client timed out at tick {tick}"))),
        SessionEnd::DynamicsFailure(m) => Err(internal(format!("dynamics failure: {m}"))),
    }
}

pub fn drive(a: DriveArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let driver = build_driver(&cfg, &a.driver)?;
    let report = run_driver(a.connect.as_str(), driver, |_| None).map_err(driver_error)?;
    write_estimates(&a.driver.estimates, &report.estimates)?;
    println!("frames {} estimates {}", report.frames, report.estimates.len());
    Ok(())
}

pub fn localize(a: LocalizeArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let grid = load_grid(&a.map, cfg.localize.resolution)?;
    let log = load_log(&a.log)?;
    let lidar = cfg.lidar_spec().map_err(bad_input)?;
    let mut prev: Option<EstimateRecord> = None;
    let mut last = a.initial.unwrap_or(cfg.start);
    let mut velocity = [0.0; 3];
    let mut out = Vec::new();
    for r in &log.records {
        let Some(payload) = &r.scan else { continue };
        // Constant-velocity prediction from the last two estimates.
        let prior = match prev {
            Some(p) => {
                let dt = (r.tick - p.tick) as f64;
                Pose2::new(last.x + velocity[0] * dt, last.y + velocity[1] * dt, wrap_angle(last.psi + velocity[2] * dt))
            }
            None => last,
        };
        let scan = Scan::from_ranges(r.tick, payload.fov, payload.ranges.clone(), &lidar);
        let est = match match_scan(&scan, &grid, prior, &cfg.localize.window) {
            Ok(e) => e,
            Err(e) => {
                log::warn!("tick {}: {e}", r.tick);
                continue;
            }
        };
        if let Some(p) = prev {
            let dt = (r.tick - p.tick) as f64;
            velocity = [
                (est.pose.x - last.x) / dt,
                (est.pose.y - last.y) / dt,
                wrap_angle(est.pose.psi - last.psi) / dt,
            ];
        }
        last = est.pose;
        let rec = EstimateRecord { tick: r.tick, pose: est.pose, score: est.score };
        prev = Some(rec);
        out.push(rec);
    }
    if out.is_empty() {
        return Err(bad_input(format!("{}: no scans to localize (record with --log-scans)", a.log.display())));
    }
    let text = estimates_to_jsonl(&out);
    match &a.out {
        Some(p) => write(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn mean_laps(log: &RunLog, reference: &ReferenceTrajectory, path: &Path) -> Result<LapMetrics> {
    mean_metrics(&lap_metrics(log, reference))
        .ok_or_else(|| bad_input(format!("{}: no complete lap", path.display())))
}

fn fmt_reduction(r: Option<f64>) -> String {
    r.map_or("n/a".into(), |v| format!("{:.0}%", 100.0 * v))
}

pub fn eval_gap(a: GapArgs) -> Result<()> {
    let reference = load_reference(&a.reference, !a.open)?;
    let sim = mean_laps(&load_log(&a.sim)?, &reference, &a.sim)?;
    let real = mean_laps(&load_log(&a.real)?, &reference, &a.real)?;
    let baseline = match &a.baseline {
        Some(p) => Some(gap_delta(&mean_laps(&load_log(p)?, &reference, p)?, &real, None).delta),
        None => None,
    };
    let report = gap_delta(&sim, &real, baseline.as_ref());
    println!("{:<8} {:>10} {:>10} {:>10}", "", "T_lap", "d_max", "d_avg");
    for (name, m) in [("sim", sim), ("real", real)] {
        println!("{:<8} {:>10.4} {:>10.4} {:>10.4}", name, m.t_lap, m.d_max, m.d_avg);
    }
    let d = report.delta;
    println!("{:<8} {:>10.4} {:>10.4} {:>10.4}", "delta", d.t_lap, d.d_max, d.d_avg);
    if let Some(b) = report.baseline {
        println!("{:<8} {:>10.4} {:>10.4} {:>10.4}", "baseline", b.t_lap, b.d_max, b.d_avg);
    }
    if let Some(r) = report.reduction {
        println!(
            "{:<8} {:>10} {:>10} {:>10}",
            "reduct.",
            fmt_reduction(r.t_lap),
            fmt_reduction(r.d_max),
            fmt_reduction(r.d_avg)
        );
    }
    if let Some(p) = &a.out {
        let json = serde_json::json!({ "sim": sim, "real": real, "gap": report });
        write(p, &(serde_json::to_string_pretty(&json).map_err(internal)? + "\n"))?;
    }
    Ok(())
}

pub fn eval_rmse(a: RmseArgs) -> Result<()> {
    let est = estimates_from_jsonl(&read(&a.est)?).map_err(|e| bad_input(format!("{}: {e}", a.est.display())))?;
    let truth = load_log(&a.truth)?;
    let (e, t) = align_estimates(&est, &truth).map_err(bad_input)?;
    let (dpos, dpsi) = pose_rmse(&e, &t).map_err(bad_input)?;
    println!("poses {} pos_rmse {:.4} m heading_rmse {:.4} rad", e.len(), dpos, dpsi);
    if let Some(p) = &a.out {
        let json = serde_json::json!({ "poses": e.len(), "pos_rmse": dpos, "heading_rmse": dpsi });
        write(p, &(serde_json::to_string_pretty(&json).map_err(internal)? + "\n"))?;
    }
    Ok(())
}

pub fn eval_reduce(a: ReduceArgs) -> Result<()> {
    if a.baseline < 0.0 || a.ours < 0.0 {
        return Err(bad_input("gaps must be non-negative"));
    }
    match reduction(a.baseline, a.ours) {
        Some(r) => println!("reduction {:.0}% ({r:.4})", 100.0 * r),
        None => println!("reduction n/a (baseline gap is zero)"),
    }
    Ok(())
}

pub fn eval_laps(a: LapsArgs) -> Result<()> {
    let reference = load_reference(&a.reference, !a.open)?;
    let laps = lap_metrics(&load_log(&a.log)?, &reference);
    println!("{:<4} {:>10} {:>10} {:>10}", "lap", "T_lap", "d_max", "d_avg");
    for (i, m) in laps.iter().enumerate() {
        println!("{:<4} {:>10.4} {:>10.4} {:>10.4}", i + 1, m.t_lap, m.d_max, m.d_avg);
    }
    if laps.is_empty() {
        println!("no complete lap");
    }
    Ok(())
}

pub fn gen_oval(a: GenOvalArgs, ci: bool) -> Result<()> {
    if ci && a.seed.is_none() {
        return Err(bad_input("--seed is required with --ci"));
    }
    let mut params = OvalParams::default();
    if let Some(s) = a.seed {
        params.seed = s;
    }
    let sc = make_oval(&params);
    let cloud_name = match a.format {
        Format::Ply => "cloud.ply",
        Format::Xyz => "cloud.xyz",
    };
    let cloud = match a.format {
        Format::Ply => sc.cloud.to_ascii_ply(),
        Format::Xyz => sc.cloud.to_xyz(),
    };
    write(&a.out_dir.join(cloud_name), &cloud)?;
    write(&a.out_dir.join("truth_map.json"), &sc.map.to_json())?;
    write(&a.out_dir.join("reference.csv"), &sc.reference.to_csv())?;
    let cfg = RunConfig {
        seed: params.seed,
        scan_every: Some(4),
        start: sc.start,
        map: Some("truth_map.json".into()),
        reference: Some("reference.csv".into()),
        ..RunConfig::default()
    };
    write(&a.out_dir.join("config.toml"), &cfg.to_toml())?;
    println!(
        "{} points, {} wall segments, reference {:.3} m -> {}",
        sc.cloud.len(),
        sc.map.segments().len(),
        sc.reference.length(),
        a.out_dir.display()
    );
    Ok(())
}
