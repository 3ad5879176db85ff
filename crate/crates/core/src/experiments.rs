//! Named experiments producing CSV tables and optional SVG charts.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{load_with_overrides, ConfigError, GlobalConfig, MemoryConfig, PktGenConfig, PleConfig, ReassemblyConfig, SchedulerConfig, SimConfig};
use crate::datapath::tick_all;
use crate::harness::kv::{self, KvConfig, KvReport, KvSetup};
use crate::harness::link::LinkConfig;
use crate::harness::metrics::{percentile, summarize};
use crate::harness::microbench::{self, MicroConfig, SizeMix};
use crate::harness::transfer;
use crate::plot::{line_chart, Series};
use crate::protocols::{ProtocolKind, RoceConfig, TcpConfig};

pub const EXPERIMENTS: [&str; 8] = ["fig3", "fig4a", "fig4b", "fig4c", "fig5a", "fig5b", "fig5c", "props"];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown experiment `{0}`; registered: {list}", list = EXPERIMENTS.join(", "))]
    Unknown(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct E2eConfig {
    pub queues_kb: Vec<u64>,
    pub protocols: Vec<ProtocolKind>,
    /// Every n-th latency sample is plotted.
    pub plot_stride: usize,
}

impl Default for E2eConfig {
    fn default() -> Self {
        Self {
            queues_kb: vec![12, 24],
            protocols: vec![ProtocolKind::TcpAimd, ProtocolKind::Rocev2Dcqcn],
            plot_stride: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropsConfig {
    pub loss_rate: f64,
    pub tcp_stream_bytes: u32,
    pub roce_messages: usize,
    pub roce_max_len: u32,
    pub cycle_budget: u64,
}

impl Default for PropsConfig {
    fn default() -> Self {
        Self {
            loss_rate: 0.01,
            tcp_stream_bytes: 1 << 20,
            roce_messages: 1000,
            roce_max_len: 4096,
            cycle_budget: 20_000_000,
        }
    }
}

/// Everything an experiment run can be configured with.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub global: GlobalConfig,
    pub scheduler: SchedulerConfig,
    pub ple: PleConfig,
    pub pktgen: PktGenConfig,
    pub memory: MemoryConfig,
    pub reassembly: ReassemblyConfig,
    pub tcp: TcpConfig,
    pub roce: RoceConfig,
    pub link: LinkConfig,
    pub kv: KvConfig,
    pub e2e: E2eConfig,
    pub micro: MicroConfig,
    pub props: PropsConfig,
    /// Cycles recorded when tracing is requested.
    pub trace_cycles: u64,
}

impl RunConfig {
    /// Parses TOML text (if any), then `key=value` overrides, then validates.
    pub fn load(text: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut c: Self = load_with_overrides(text, overrides)?;
        if c.trace_cycles == 0 {
            c.trace_cycles = 3000;
        }
        c.sim().validate()?;
        Ok(c)
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            global: self.global.clone(),
            scheduler: self.scheduler.clone(),
            ple: self.ple.clone(),
            pktgen: self.pktgen.clone(),
            memory: self.memory.clone(),
            reassembly: self.reassembly.clone(),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.global.rng_seed = seed;
        self.kv.seed = seed;
        self.micro.seed = seed;
    }

    fn kv_setup(&self, protocol: ProtocolKind, queue_kb: u64) -> KvSetup {
        KvSetup {
            sim: self.sim(),
            tcp: self.tcp.clone(),
            roce: self.roce.clone(),
            link: self.link.clone(),
            kv: KvConfig {
                protocol,
                queue_kb,
                ..self.kv.clone()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub plot: bool,
    pub trace: bool,
}

/// One output file, named relative to the output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    /// Names of checked invariants that did not hold.
    pub failures: Vec<String>,
}

impl Outcome {
    fn file(&mut self, name: impl Into<String>, contents: String) {
        self.artifacts.push(Artifact {
            name: name.into(),
            contents,
        });
    }
}

/// Runs one registered experiment, or all of them for `"all"`.
pub fn run(name: &str, cfg: &RunConfig, opts: RunOptions) -> Result<Outcome, ExperimentError> {
    if name == "all" {
        let mut out = Outcome::default();
        for n in EXPERIMENTS {
            let o = run(n, cfg, opts)?;
            out.artifacts.extend(o.artifacts);
            out.failures.extend(o.failures);
        }
        return Ok(out);
    }
    let mut out = Outcome::default();
    match name {
        "fig3" => fig3(cfg, opts, &mut out),
        "fig4a" => fig4_ramp("fig4a", cfg, opts, &mut out, &[(10, 3), (10, 10), (10, 100)]),
        "fig4b" => fig4_ramp("fig4b", cfg, opts, &mut out, &[(1, 3), (10, 3), (100, 3)]),
        "fig4c" => fig4c(cfg, opts, &mut out),
        "fig5a" => fig5a(cfg, opts, &mut out),
        "fig5b" => fig5b(cfg, opts, &mut out),
        "fig5c" => fig5c(cfg, opts, &mut out),
        "props" => props(cfg, &mut out),
        other => return Err(ExperimentError::Unknown(other.to_string())),
    }
    Ok(out)
}

pub const E2E_HEADER: &str = "protocol,queue_kb,phase,avg_cycles,p90_cycles,samples";

/// Runs every end-to-end point, concurrently, in a fixed result order.
pub fn e2e_points(cfg: &RunConfig) -> Vec<KvReport> {
    let setups: Vec<KvSetup> = cfg
        .e2e
        .queues_kb
        .iter()
        .flat_map(|&q| cfg.e2e.protocols.iter().map(move |&p| (p, q)))
        .map(|(p, q)| cfg.kv_setup(p, q))
        .collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = setups.iter().map(|st| s.spawn(move || kv::run(st))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("experiment point panicked"))
            .collect()
    })
}

pub fn e2e_csv(reports: &[KvReport]) -> String {
    let mut csv = format!("{E2E_HEADER}\n");
    for r in reports {
        for p in &r.phases {
            let _ = writeln!(
                csv,
                "{},{},{},{:.2},{},{}",
                r.protocol.name(),
                r.queue_kb,
                p.phase,
                p.summary.mean,
                p.summary.p90,
                p.summary.samples
            );
        }
    }
    csv
}

fn fig3(cfg: &RunConfig, opts: RunOptions, out: &mut Outcome) {
    let reports = e2e_points(cfg);
    for r in &reports {
        if !r.complete {
            out.failures.push(format!(
                "fig3 {} {}KB: {} of {} requests answered within the cycle budget",
                r.protocol.name(),
                r.queue_kb,
                r.answered,
                r.requests
            ));
        }
    }
    out.file("fig3.csv", e2e_csv(&reports));
    let mut samples = String::from("protocol,queue_kb,issue_cycle,latency_cycles\n");
    for r in &reports {
        for &(t, l) in &r.samples {
            let _ = writeln!(samples, "{},{},{t},{l}", r.protocol.name(), r.queue_kb);
        }
    }
    out.file("fig3_samples.csv", samples);
    let mut links = String::from(
        "protocol,queue_kb,direction,packets_in,packets_dropped,marked,lost,max_resident_bytes\n",
    );
    for r in &reports {
        for (dir, s) in ["request", "response"].iter().zip(&r.links) {
            let _ = writeln!(
                links,
                "{},{},{dir},{},{},{},{},{}",
                r.protocol.name(),
                r.queue_kb,
                s.packets_in,
                s.packets_dropped,
                s.marked,
                s.lost,
                s.max_resident
            );
        }
    }
    out.file("fig3_links.csv", links);
    if opts.plot {
        let stride = cfg.e2e.plot_stride.max(1);
        let series: Vec<Series> = reports
            .iter()
            .map(|r| Series {
                label: format!("{} {}KB", r.protocol.name(), r.queue_kb),
                points: r
                    .samples
                    .iter()
                    .step_by(stride)
                    .map(|&(t, l)| (t as f64, l as f64))
                    .collect(),
            })
            .collect();
        out.file(
            "fig3.svg",
            line_chart("Request-response latency", "issue cycle", "latency (cycles)", &series),
        );
    }
    if opts.trace {
        for &q in &cfg.e2e.queues_kb {
            for &p in &cfg.e2e.protocols {
                let mut world = kv::build_world(&cfg.kv_setup(p, q));
                for n in world.nodes.iter_mut() {
                    n.set_trace(true);
                }
                for _ in 0..cfg.trace_cycles {
                    tick_all(&mut world);
                }
                for (node, role) in world.nodes.iter().zip(["client", "server"]) {
                    out.file(
                        format!("fig3_{}_{q}kb_{role}_trace.csv", p.name()),
                        node.trace().render(),
                    );
                }
            }
        }
    }
}

/// (burst, depth) points sharing one throughput-versus-cycle figure.
fn fig4_ramp(name: &str, cfg: &RunConfig, opts: RunOptions, out: &mut Outcome, points: &[(usize, u32)]) {
    let m = &cfg.micro;
    let mut csv = String::from("depth,burst,cycle,events_per_cycle\n");
    let mut summary = String::from("depth,burst,cycles_to_saturation\n");
    let mut series = Vec::new();
    for &(burst, depth) in points {
        let run = microbench::sched_run(m, m.sched_flows, burst, depth);
        let tp = run.throughput(m.window);
        for &(c, r) in &tp {
            let _ = writeln!(csv, "{depth},{burst},{},{r:.4}", c - run.first_ingest);
        }
        let reach = run
            .time_to(m.window, m.saturation)
            .map(|t| t.to_string())
            .unwrap_or_else(|| "never".into());
        let _ = writeln!(summary, "{depth},{burst},{reach}");
        series.push(Series {
            label: format!("depth {depth} burst {burst}"),
            points: tp
                .iter()
                .take(2000)
                .map(|&(c, r)| ((c - run.first_ingest) as f64, r))
                .collect(),
        });
    }
    out.file(format!("{name}.csv"), csv);
    out.file(format!("{name}_summary.csv"), summary);
    if opts.plot {
        out.file(
            format!("{name}.svg"),
            line_chart("Scheduler cold start", "cycle", "events per cycle", &series),
        );
    }
    if opts.trace {
        let (burst, depth) = points[0];
        out.file(
            format!("{name}_trace.csv"),
            microbench::sched_trace(m, m.sched_flows, burst, depth, cfg.trace_cycles),
        );
    }
}

fn fig4c(cfg: &RunConfig, opts: RunOptions, out: &mut Outcome) {
    let m = &cfg.micro;
    let depth = cfg.ple.depth_override.unwrap_or(3);
    let mut summary = String::from("depth,burst,mean_cycles,p50_cycles,p90_cycles,max_cycles,events\n");
    let mut cdf = String::from("depth,burst,latency_cycles,fraction\n");
    let mut series = Vec::new();
    for burst in [1usize, 10, 100] {
        let lat = microbench::load_latency(m, m.sched_flows, burst, depth);
        let mut v: Vec<u64> = lat.iter().map(|&d| d.max(0) as u64).collect();
        v.sort_unstable();
        let mean = lat.iter().sum::<i64>() as f64 / lat.len() as f64;
        let _ = writeln!(
            summary,
            "{depth},{burst},{mean:.3},{},{},{},{}",
            percentile(&v, 0.5),
            percentile(&v, 0.9),
            v.last().unwrap(),
            v.len()
        );
        let mut pts = Vec::new();
        let mut i = 0;
        while i < v.len() {
            let x = v[i];
            while i < v.len() && v[i] == x {
                i += 1;
            }
            let frac = i as f64 / v.len() as f64;
            let _ = writeln!(cdf, "{depth},{burst},{x},{frac:.5}");
            pts.push((x as f64, frac));
        }
        series.push(Series {
            label: format!("burst {burst}"),
            points: pts,
        });
    }
    out.file("fig4c.csv", summary);
    out.file("fig4c_cdf.csv", cdf);
    if opts.plot {
        out.file(
            "fig4c.svg",
            line_chart("Load-induced latency", "latency (cycles)", "CDF", &series),
        );
    }
}

fn fig5a(cfg: &RunConfig, opts: RunOptions, out: &mut Outcome) {
    let m = &cfg.micro;
    let run = microbench::pktgen_run(
        &cfg.sim(),
        m,
        SizeMix::Uniform {
            min: m.pktgen_min_size,
            max: m.pktgen_max_size,
        },
        100,
    );
    let sim = cfg.sim();
    let mut csv = String::from("cycle,bytes_per_cycle,gbps\n");
    for &(c, b) in &run.series {
        let _ = writeln!(csv, "{c},{b:.3},{:.3}", sim.bytes_per_cycle_to_gbps(b));
    }
    out.file("fig5a.csv", csv);
    let t = run.overall;
    out.file(
        "fig5a_summary.csv",
        format!(
            "sizes,bytes_per_cycle,payload_bytes_per_cycle,gbps\nuniform_{}_{},{:.3},{:.3},{:.3}\n",
            m.pktgen_min_size, m.pktgen_max_size, t.bytes_per_cycle, t.payload_bytes_per_cycle, t.gbps
        ),
    );
    if opts.plot {
        let line = sim.line_rate_bytes_per_cycle();
        let series = vec![
            Series {
                label: "random sizes".into(),
                points: run.series.iter().map(|&(c, b)| (c as f64, sim.bytes_per_cycle_to_gbps(b))).collect(),
            },
            Series {
                label: "line rate".into(),
                points: vec![
                    (run.series[0].0 as f64, sim.bytes_per_cycle_to_gbps(line)),
                    (run.series.last().unwrap().0 as f64, sim.bytes_per_cycle_to_gbps(line)),
                ],
            },
        ];
        out.file("fig5a.svg", line_chart("Packet generation, random sizes", "cycle", "Gbps", &series));
    }
}

pub const SIZES: [u32; 6] = [64, 128, 256, 512, 1024, 1500];

fn fig5b(cfg: &RunConfig, opts: RunOptions, out: &mut Outcome) {
    let sim = cfg.sim();
    let mut csv = String::from("size,bytes_per_cycle,gbps,payload_bytes_per_cycle\n");
    let mut pts = Vec::new();
    for s in SIZES {
        let t = microbench::pktgen_run(&sim, &cfg.micro, SizeMix::Fixed(s), 100).overall;
        let _ = writeln!(csv, "{s},{:.3},{:.3},{:.3}", t.bytes_per_cycle, t.gbps, t.payload_bytes_per_cycle);
        pts.push((s as f64, t.gbps));
    }
    out.file("fig5b.csv", csv);
    if opts.plot {
        out.file("fig5b.svg", size_chart("Packet generation, fixed sizes", "packet size (bytes)", pts, &sim));
    }
}

fn fig5c(cfg: &RunConfig, opts: RunOptions, out: &mut Outcome) {
    let sim = cfg.sim();
    let mut csv = String::from("seg_size,bytes_per_cycle,gbps\n");
    let mut pts = Vec::new();
    for s in SIZES {
        let t = microbench::reassembly_run(&sim, &cfg.micro, s);
        let _ = writeln!(csv, "{s},{:.3},{:.3}", t.bytes_per_cycle, t.gbps);
        pts.push((s as f64, t.gbps));
    }
    out.file("fig5c.csv", csv);
    if opts.plot {
        out.file("fig5c.svg", size_chart("Reassembly, misaligned segments", "segment size (bytes)", pts, &sim));
    }
}

fn size_chart(title: &str, x: &str, pts: Vec<(f64, f64)>, sim: &SimConfig) -> String {
    let line = sim.bytes_per_cycle_to_gbps(sim.line_rate_bytes_per_cycle());
    let span = (pts[0].0, pts.last().unwrap().0);
    line_chart(
        title,
        x,
        "Gbps",
        &[
            Series {
                label: "measured".into(),
                points: pts,
            },
            Series {
                label: "line rate".into(),
                points: vec![(span.0, line), (span.1, line)],
            },
        ],
    )
}

fn props(cfg: &RunConfig, out: &mut Outcome) {
    let p = &cfg.props;
    let sim = cfg.sim();
    let link = LinkConfig {
        loss_rate: p.loss_rate,
        ..cfg.link.clone()
    };
    let seed = cfg.micro.seed;
    let mut csv = String::from("property,passed,detail\n");
    let mut check = |name: &str, ok: bool, detail: String| {
        let _ = writeln!(csv, "{name},{ok},{}", detail.replace(',', ";"));
        if !ok {
            out.failures.push(format!("{name}: {detail}"));
        }
    };

    let t = transfer::tcp_stream(&sim, &cfg.tcp, &link, p.tcp_stream_bytes, seed, p.cycle_budget);
    check(
        "tcp_stream_exactly_once",
        t.exact(),
        format!(
            "delivered {} of {} bytes; mismatched {}; lost {}",
            t.delivered,
            t.bytes,
            t.mismatched_bytes,
            t.links[0].lost + t.links[1].lost
        ),
    );
    check(
        "tcp_loss_exercised",
        p.loss_rate == 0.0 || t.links[0].lost > 0,
        format!("{} data packets lost", t.links[0].lost),
    );

    let msgs = transfer::message_mix(p.roce_messages, p.roce_max_len, seed);
    let r = transfer::roce_messages(&sim, &cfg.roce, &link, &msgs, seed, p.cycle_budget);
    check(
        "roce_messages_in_msn_order",
        r.exact(),
        format!(
            "completed {} of {}; in order {}; mismatched {}; duplicates {}; lost {}",
            r.completed,
            r.messages,
            r.in_order,
            r.mismatched_bytes,
            r.duplicate_bytes,
            r.links[0].lost + r.links[1].lost
        ),
    );

    let run = microbench::sched_run(&cfg.micro, 64, 10, 3);
    let mut fifo = true;
    let mut last: std::collections::HashMap<_, u64> = std::collections::HashMap::new();
    let mut by_dispatch = run.log.clone();
    by_dispatch.sort_by_key(|r| r.dispatch);
    for r in &by_dispatch {
        if last.insert(r.flow, r.serial).is_some_and(|s| s > r.serial) {
            fifo = false;
        }
    }
    check("sched_per_flow_fifo", fifo, format!("{} dispatches", run.log.len()));
    let lat: Vec<u64> = run.log.iter().map(|r| r.dispatch - r.ingest).collect();
    check(
        "sched_dispatch_after_ingest",
        lat.iter().all(|&d| d >= 1),
        format!("mean delay {:.2}", summarize(&lat).mean),
    );
    out.file("props.csv", csv);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_experiment_lists_names() {
        let err = run("fig9", &RunConfig::default(), RunOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("fig9") && msg.contains("fig5c") && msg.contains("props"));
    }

    #[test]
    fn unknown_section_key_rejected() {
        let err = RunConfig::load(None, &["kv.queue_size=3".into()]).unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey("kv.queue_size".into()));
        let c = RunConfig::load(None, &["kv.queue_kb=24".into(), "micro.window=25".into()]).unwrap();
        assert_eq!((c.kv.queue_kb, c.micro.window), (24, 25));
    }

    #[test]
    fn e2e_csv_schema() {
        let mut cfg = RunConfig::default();
        cfg.e2e.queues_kb = vec![12];
        cfg.e2e.protocols = vec![ProtocolKind::TcpAimd];
        cfg.kv.generate_cycles = 2000;
        cfg.kv.congestion = false;
        let csv = e2e_csv(&e2e_points(&cfg));
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(E2E_HEADER));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(&row[..3], &["tcp_aimd", "12", "baseline"]);
        assert_eq!(row.len(), 6);
    }
}
