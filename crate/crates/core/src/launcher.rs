//! `mpirun`-style process launcher.
//!
//! Parses `-np N -H host:slots,...`, fills hosts block-contiguously, and starts
//! one child per rank with the `RINGWEAVE_*` variables set. Children are
//! supervised together: the first abnormal exit tears the rest down.

use std::net::{IpAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::runtime::{
    ENV_ADDRS, ENV_LOCAL_RANK, ENV_RANK, ENV_SIZE, ENV_TIMELINE,
};
use crate::timeline::merge_rank_traces;

pub const DEFAULT_BASE_PORT: u16 = 29500;
pub const DEFAULT_GRACE: Duration = Duration::from_secs(5);
pub const TIMELINE_FILE: &str = "timeline.json";

const POLL: Duration = Duration::from_millis(20);

pub const USAGE: &str = "usage: ringrun -np <N> [-H host:slots[,host:slots...]] [--base-port P] [--timeline <dir>] -- <program> [args...]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostSpec {
    pub entries: Vec<(String, usize)>,
}

impl HostSpec {
    pub fn localhost(slots: usize) -> Self {
        HostSpec {
            entries: vec![("localhost".into(), slots)],
        }
    }

    /// Parses `host:slots[,host:slots...]`.
    pub fn parse(raw: &str) -> Result<Self> {
        let entries = raw
            .split(',')
            .map(|token| {
                let bad = || Error::Usage(format!("malformed host entry {token:?}; expected host:slots"));
                let (host, slots) = token.rsplit_once(':').ok_or_else(bad)?;
                let slots: usize = slots.parse().map_err(|_| bad())?;
                if host.is_empty() || slots == 0 {
                    return Err(bad());
                }
                Ok((host.to_string(), slots))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HostSpec { entries })
    }

    pub fn total_slots(&self) -> usize {
        self.entries.iter().map(|(_, s)| s).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaunchConfig {
    pub np: usize,
    pub hosts: HostSpec,
    pub base_port: u16,
    /// Directory for the merged `timeline.json`.
    pub timeline_dir: Option<PathBuf>,
    pub program: String,
    pub program_args: Vec<String>,
    /// Extra variables for every child, applied after the inherited environment.
    pub env: Vec<(String, String)>,
    pub grace: Duration,
    /// Tear the job down if it runs longer than this.
    pub deadline: Option<Duration>,
}

impl LaunchConfig {
    pub fn new(np: usize, program: impl Into<String>) -> Self {
        LaunchConfig {
            np,
            hosts: HostSpec::localhost(np),
            base_port: DEFAULT_BASE_PORT,
            timeline_dir: None,
            program: program.into(),
            program_args: Vec::new(),
            env: Vec::new(),
            grace: DEFAULT_GRACE,
            deadline: None,
        }
    }
}

/// Parses launcher argv, excluding the program name.
pub fn parse_args<I, S>(argv: I) -> Result<LaunchConfig>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut args = argv.into_iter().map(Into::into);
    let mut np = None;
    let mut hosts = None;
    let mut base_port = DEFAULT_BASE_PORT;
    let mut timeline_dir = None;
    let mut program = None;

    fn value(flag: &str, v: Option<String>) -> Result<String> {
        v.ok_or_else(|| Error::Usage(format!("{flag} needs a value")))
    }

    while let Some(arg) = args.next() {
        match arg.as_str() {
            "-np" | "-n" | "--np" => {
                let raw = value(&arg, args.next())?;
                let n: usize = raw
                    .parse()
                    .map_err(|_| Error::Usage(format!("-np {raw:?} is not a number")))?;
                if n == 0 {
                    return Err(Error::Usage("-np must be at least 1".into()));
                }
                np = Some(n);
            }
            "-H" | "--hosts" => hosts = Some(HostSpec::parse(&value(&arg, args.next())?)?),
            "--base-port" => {
                let raw = value(&arg, args.next())?;
                base_port = raw
                    .parse()
                    .map_err(|_| Error::Usage(format!("--base-port {raw:?} is not a port")))?;
            }
            "--timeline" => timeline_dir = Some(PathBuf::from(value(&arg, args.next())?)),
            "--" => {
                program = args.next();
                break;
            }
            other => return Err(Error::Usage(format!("unexpected argument {other:?}; {USAGE}"))),
        }
    }

    let np = np.ok_or_else(|| Error::Usage(format!("-np is required; {USAGE}")))?;
    let program = program.ok_or_else(|| Error::Usage(format!("no program given after --; {USAGE}")))?;
    let hosts = hosts.unwrap_or_else(|| HostSpec::localhost(np));
    if np > hosts.total_slots() {
        return Err(Error::Usage(format!(
            "-np {np} exceeds the {} slots available",
            hosts.total_slots()
        )));
    }
    let last_port = base_port as usize + np - 1;
    if last_port > u16::MAX as usize {
        return Err(Error::Usage(format!("--base-port {base_port} leaves no room for {np} ranks")));
    }
    Ok(LaunchConfig {
        hosts,
        base_port,
        timeline_dir,
        program_args: args.collect(),
        ..LaunchConfig::new(np, program)
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub rank: usize,
    pub host: String,
    pub local_rank: usize,
    pub endpoint: String,
}

/// Fills hosts in order, each taking a contiguous block of ranks.
pub fn assign_placement(cfg: &LaunchConfig) -> Vec<Placement> {
    let mut out = Vec::with_capacity(cfg.np);
    'hosts: for (host, slots) in &cfg.hosts.entries {
        for local_rank in 0..*slots {
            let rank = out.len();
            if rank == cfg.np {
                break 'hosts;
            }
            out.push(Placement {
                rank,
                host: host.clone(),
                local_rank,
                endpoint: format!("{host}:{}", cfg.base_port as usize + rank),
            });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct LaunchOutcome {
    /// 0 iff every child exited 0.
    pub exit_code: i32,
    /// Per-rank exit code; `None` for children that were signalled.
    pub statuses: Vec<Option<i32>>,
    pub timed_out: bool,
    pub timeline: Option<PathBuf>,
}

impl LaunchOutcome {
    pub fn success(&self) -> bool {
        self.exit_code == 0
    }
}

/// Where the merged trace goes: `--timeline <dir>` wins over an inherited
/// `RINGWEAVE_TIMELINE`.
fn merged_timeline_path(cfg: &LaunchConfig) -> Option<PathBuf> {
    if let Some(dir) = &cfg.timeline_dir {
        return Some(dir.join(TIMELINE_FILE));
    }
    let from_env = cfg
        .env
        .iter()
        .rev()
        .find(|(k, _)| k == ENV_TIMELINE)
        .map(|(_, v)| v.clone())
        .or_else(|| std::env::var(ENV_TIMELINE).ok());
    from_env.filter(|v| !v.trim().is_empty()).map(PathBuf::from)
}

pub fn rank_timeline_path(merged: &Path, rank: usize) -> PathBuf {
    let mut s = merged.as_os_str().to_owned();
    s.push(format!(".rank{rank}"));
    PathBuf::from(s)
}

fn is_local_host(host: &str) -> bool {
    if host.eq_ignore_ascii_case("localhost") {
        return true;
    }
    if let Ok(ip) = host.parse::<IpAddr>() {
        return ip.is_loopback() || ip.is_unspecified();
    }
    local_hostname().is_some_and(|h| h.eq_ignore_ascii_case(host))
}

fn local_hostname() -> Option<String> {
    let mut buf = [0u8; 256];
    // SAFETY: the buffer is valid for its whole length and gethostname
    // writes at most that many bytes.
    let rc = unsafe { libc::gethostname(buf.as_mut_ptr().cast(), buf.len()) };
    if rc != 0 {
        return None;
    }
    let end = buf.iter().position(|&b| b == 0).unwrap_or(buf.len());
    String::from_utf8(buf[..end].to_vec()).ok()
}

/// Runs the job to completion and reports how it ended.
pub fn launch(cfg: &LaunchConfig) -> Result<LaunchOutcome> {
    let placement = assign_placement(cfg);
    if placement.len() != cfg.np {
        return Err(Error::Usage(format!(
            "-np {} exceeds the {} slots available",
            cfg.np,
            cfg.hosts.total_slots()
        )));
    }
    if let Some(p) = placement.iter().find(|p| !is_local_host(&p.host)) {
        return Err(Error::Unsupported(format!(
            "host {:?} is not this machine; only local spawning is supported",
            p.host
        )));
    }

    let addrs = placement
        .iter()
        .map(|p| p.endpoint.as_str())
        .collect::<Vec<_>>()
        .join(",");
    let merged = merged_timeline_path(cfg);
    if let Some(dir) = merged.as_ref().and_then(|m| m.parent()) {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }

    let mut children: Vec<Child> = Vec::with_capacity(cfg.np);
    for p in &placement {
        let mut cmd = Command::new(&cfg.program);
        cmd.args(&cfg.program_args);
        for (k, v) in &cfg.env {
            cmd.env(k, v);
        }
        cmd.env(ENV_RANK, p.rank.to_string())
            .env(ENV_SIZE, cfg.np.to_string())
            .env(ENV_LOCAL_RANK, p.local_rank.to_string())
            .env(ENV_ADDRS, &addrs);
        match &merged {
            Some(m) => cmd.env(ENV_TIMELINE, rank_timeline_path(m, p.rank)),
            None => cmd.env_remove(ENV_TIMELINE),
        };
        match cmd.spawn() {
            Ok(c) => children.push(c),
            Err(e) => {
                teardown(&mut children, Duration::ZERO);
                return Err(Error::Config(format!("failed to start {:?}: {e}", cfg.program)));
            }
        }
    }

    let sup = supervise(&mut children, cfg.grace, cfg.deadline);
    let codes: Vec<Option<i32>> = sup.statuses.iter().map(|s| s.and_then(|s| s.code())).collect();
    let exit_code = if sup.timed_out {
        124
    } else {
        match sup.first_failure {
            Some(r) => codes[r].filter(|c| *c != 0).unwrap_or(1),
            None => 0,
        }
    };

    let timeline = match &merged {
        Some(m) => {
            let parts: Vec<PathBuf> = (0..cfg.np)
                .map(|r| rank_timeline_path(m, r))
                .filter(|p| p.exists())
                .collect();
            if parts.is_empty() {
                None
            } else {
                match merge_rank_traces(&parts, m) {
                    Ok(_) => {
                        for p in &parts {
                            let _ = std::fs::remove_file(p);
                        }
                        Some(m.clone())
                    }
                    Err(e) => {
                        log::warn!("could not merge timelines into {}: {e}", m.display());
                        None
                    }
                }
            }
        }
        None => None,
    };

    Ok(LaunchOutcome {
        exit_code,
        statuses: codes,
        timed_out: sup.timed_out,
        timeline,
    })
}

struct Supervised {
    statuses: Vec<Option<ExitStatus>>,
    first_failure: Option<usize>,
    timed_out: bool,
}

/// Waits for every child. The first failure, or the deadline passing, triggers
/// teardown of whoever is still running.
fn supervise(children: &mut [Child], grace: Duration, deadline: Option<Duration>) -> Supervised {
    let started = Instant::now();
    let mut statuses: Vec<Option<ExitStatus>> = vec![None; children.len()];
    let mut first_failure = None;
    loop {
        let mut failed = false;
        for (rank, (child, status)) in children.iter_mut().zip(statuses.iter_mut()).enumerate() {
            if status.is_none() {
                if let Ok(Some(s)) = child.try_wait() {
                    if !s.success() {
                        failed = true;
                        first_failure.get_or_insert(rank);
                    }
                    *status = Some(s);
                }
            }
        }
        if statuses.iter().all(Option::is_some) {
            return Supervised {
                statuses,
                first_failure,
                timed_out: false,
            };
        }
        let timed_out = deadline.is_some_and(|d| started.elapsed() >= d);
        if failed || timed_out {
            if failed {
                log::warn!("a rank failed; stopping the remaining ranks");
            } else {
                log::warn!("job exceeded its deadline; stopping all ranks");
            }
            for (child, status) in children.iter_mut().zip(statuses.iter_mut()) {
                if status.is_none() {
                    terminate(child);
                }
            }
            let until = Instant::now() + grace;
            for (child, status) in children.iter_mut().zip(statuses.iter_mut()) {
                if status.is_none() {
                    *status = wait_until(child, until);
                }
            }
            return Supervised {
                statuses,
                first_failure,
                timed_out,
            };
        }
        std::thread::sleep(POLL);
    }
}

fn terminate(child: &Child) {
    // SAFETY: plain syscall on a pid we spawned and have not reaped yet.
    unsafe {
        libc::kill(child.id() as libc::pid_t, libc::SIGTERM);
    }
}

fn wait_until(child: &mut Child, until: Instant) -> Option<ExitStatus> {
    loop {
        if let Ok(Some(s)) = child.try_wait() {
            return Some(s);
        }
        if Instant::now() >= until {
            let _ = child.kill();
            return child.wait().ok();
        }
        std::thread::sleep(POLL);
    }
}

fn teardown(children: &mut [Child], grace: Duration) {
    for c in children.iter() {
        terminate(c);
    }
    let until = Instant::now() + grace;
    for c in children.iter_mut() {
        wait_until(c, until);
    }
}

/// Finds a base port with `np` consecutive free loopback ports above it.
pub fn find_free_base_port(np: usize) -> Result<u16> {
    for _ in 0..64 {
        let probe = TcpListener::bind("127.0.0.1:0")?;
        let base = probe.local_addr()?.port();
        drop(probe);
        if base as usize + np > u16::MAX as usize {
            continue;
        }
        let held: std::io::Result<Vec<TcpListener>> = (0..np as u16)
            .map(|i| TcpListener::bind(("127.0.0.1", base + i)))
            .collect();
        if held.is_ok() {
            return Ok(base);
        }
    }
    Err(Error::Config(format!("no run of {np} free ports found")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(line: &str) -> Result<LaunchConfig> {
        parse_args(line.split_whitespace())
    }

    #[test]
    fn sixteen_ranks_on_four_hosts() {
        let cfg = parse("-np 16 -H server1:4,server2:4,server3:4,server4:4 -- prog").unwrap();
        assert_eq!(cfg.np, 16);
        assert_eq!(cfg.hosts.entries.len(), 4);
        assert!(cfg.hosts.entries.iter().all(|(_, s)| *s == 4));
        let placement = assign_placement(&cfg);
        assert_eq!(placement.len(), 16);
        for p in &placement {
            assert_eq!(p.host, format!("server{}", p.rank / 4 + 1));
            assert_eq!(p.local_rank, p.rank % 4);
            assert_eq!(p.endpoint, format!("{}:{}", p.host, 29500 + p.rank));
        }
        let server2: Vec<_> = placement.iter().filter(|p| p.host == "server2").collect();
        assert_eq!(server2.iter().map(|p| p.rank).collect::<Vec<_>>(), vec![4, 5, 6, 7]);
        assert_eq!(server2.iter().map(|p| p.local_rank).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn one_rank_defaults_to_localhost() {
        let cfg = parse("-np 1 -- prog").unwrap();
        assert_eq!(
            assign_placement(&cfg),
            vec![Placement {
                rank: 0,
                host: "localhost".into(),
                local_rank: 0,
                endpoint: "localhost:29500".into(),
            }]
        );
    }

    #[test]
    fn local_ranks_on_one_host() {
        let cfg = parse("-np 4 -H localhost:4 -- prog").unwrap();
        let lr: Vec<_> = assign_placement(&cfg).iter().map(|p| p.local_rank).collect();
        assert_eq!(lr, vec![0, 1, 2, 3]);
    }

    #[test]
    fn partial_last_host() {
        let cfg = parse("-np 3 -H a:2,b:2 -- prog").unwrap();
        let hosts: Vec<_> = assign_placement(&cfg).into_iter().map(|p| (p.host, p.local_rank)).collect();
        assert_eq!(hosts, vec![("a".into(), 0), ("a".into(), 1), ("b".into(), 0)]);
    }

    #[test]
    fn oversubscription_rejected() {
        let err = parse("-np 5 -H a:2,b:2 -- prog").unwrap_err();
        assert!(matches!(err, Error::Usage(ref m) if m.contains("5")), "{err}");
    }

    #[test]
    fn malformed_hosts_name_the_token() {
        for bad in ["a", "a:", ":3", "a:0", "a:x", "a:2,,b:1"] {
            let err = parse(&format!("-np 1 -H {bad} -- prog")).unwrap_err();
            match err {
                Error::Usage(m) => assert!(m.contains("malformed host entry"), "{bad}: {m}"),
                other => panic!("{bad}: {other}"),
            }
        }
        let err = parse("-np 1 -H good:1,oops -- prog").unwrap_err();
        assert!(err.to_string().contains("\"oops\""), "{err}");
    }

    #[test]
    fn program_args_pass_through() {
        let cfg = parse("-np 2 --base-port 4000 --timeline /tmp/t -- prog -np 9 --x").unwrap();
        assert_eq!(cfg.program, "prog");
        assert_eq!(cfg.program_args, vec!["-np", "9", "--x"]);
        assert_eq!(cfg.base_port, 4000);
        assert_eq!(cfg.timeline_dir, Some(PathBuf::from("/tmp/t")));
    }

    #[test]
    fn missing_pieces_are_usage_errors() {
        for line in ["-- prog", "-np 2", "-np 0 -- prog", "-np two -- prog", "--bogus -np 1 -- prog", "-np 2 --base-port 65535 -- prog"] {
            assert!(matches!(parse(line), Err(Error::Usage(_))), "{line}");
        }
    }

    #[test]
    fn parsing_is_pure() {
        let line = "-np 6 -H x:3,y:3 -- prog";
        assert_eq!(assign_placement(&parse(line).unwrap()), assign_placement(&parse(line).unwrap()));
    }

    #[test]
    fn remote_hosts_refused() {
        let cfg = parse("-np 2 -H server1:2 -- true").unwrap();
        assert!(matches!(launch(&cfg), Err(Error::Unsupported(_))));
    }

    #[test]
    fn rank_timeline_suffix() {
        assert_eq!(rank_timeline_path(Path::new("/t/x.json"), 3), PathBuf::from("/t/x.json.rank3"));
    }

    #[test]
    fn exit_codes_aggregate() {
        let mut ok = LaunchConfig::new(3, "sh");
        ok.program_args = vec!["-c".into(), "exit 0".into()];
        ok.base_port = find_free_base_port(3).unwrap();
        assert!(launch(&ok).unwrap().success());

        let mut bad = ok.clone();
        bad.program_args = vec!["-c".into(), "[ \"$RINGWEAVE_RANK\" = 1 ] && exit 3; sleep 30".into()];
        let started = Instant::now();
        let out = launch(&bad).unwrap();
        assert_eq!(out.exit_code, 3);
        assert_eq!(out.statuses[1], Some(3));
        assert!(started.elapsed() < Duration::from_secs(10));
    }

    #[test]
    fn missing_program_is_config_error() {
        let cfg = LaunchConfig::new(1, "/definitely/not/a/program");
        assert!(matches!(launch(&cfg), Err(Error::Config(_))));
    }
}
