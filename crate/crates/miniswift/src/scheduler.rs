//! Site scheduling policy: score-weighted site selection, multiplicative
//! score updates, windowed task clustering, and the failure ladder
//! (retry in place, move off a bad host, move off a bad site, give up).
//! The engine owns the clock and the queues; everything here is policy.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::Deserialize;

use crate::provider::FailureClass;

#[derive(Debug, Clone)]
pub struct SchedulerCfg {
    /// A task that has failed this many times is failed for good.
    pub max_retries: u32,
    /// Consecutive failures on one site before trying another.
    pub site_failure_k: u32,
    /// How long a host stays suspended after a host-class failure.
    pub suspend_s: f64,
    pub cluster_window_s: f64,
    /// Bundle size limit; 1 disables clustering.
    pub cluster_cap: usize,
    pub score_up: f64,
    pub score_down: f64,
    pub score_min: f64,
    pub score_max: f64,
}

impl Default for SchedulerCfg {
    fn default() -> Self {
        SchedulerCfg {
            max_retries: 3,
            site_failure_k: 3,
            suspend_s: 30.0,
            cluster_window_s: 0.5,
            cluster_cap: 1,
            score_up: 1.05,
            score_down: 0.8,
            score_min: 0.1,
            score_max: 10.0,
        }
    }
}

/// One entry in a sites file.
#[derive(Debug, Clone, Deserialize)]
pub struct SiteConfig {
    pub site_id: String,
    pub provider: String,
    #[serde(default)]
    pub provider_params: serde_json::Value,
    #[serde(default = "default_throttle")]
    pub throttle: usize,
    /// Apps this site can run; empty means any.
    #[serde(default)]
    pub apps: Vec<String>,
    #[serde(default = "default_score")]
    pub initial_score: f64,
}

fn default_throttle() -> usize {
    16
}

fn default_score() -> f64 {
    1.0
}

pub fn parse_sites(json: &str) -> Result<Vec<SiteConfig>, String> {
    let sites: Vec<SiteConfig> =
        serde_json::from_str(json).map_err(|e| format!("sites file: {e}"))?;
    if sites.is_empty() {
        return Err("sites file: no sites defined".into());
    }
    let mut seen = BTreeSet::new();
    for s in &sites {
        if !seen.insert(s.site_id.clone()) {
            return Err(format!("sites file: duplicate site_id {}", s.site_id));
        }
        match s.provider.as_str() {
            "local" | "simbatch" | "falkon" | "falkon-sim" => {}
            other => return Err(format!("sites file: unknown provider {other:?} for {}", s.site_id)),
        }
        if s.throttle == 0 {
            return Err(format!("sites file: {} has throttle 0", s.site_id));
        }
    }
    Ok(sites)
}

/// Scheduler's view of one site. Provider handles live in the engine.
#[derive(Debug, Clone)]
pub struct SiteState {
    pub site_id: String,
    pub score: f64,
    pub throttle: usize,
    pub apps: Option<BTreeSet<String>>,
    pub jobs_in_flight: usize,
    /// host name -> time the suspension lifts
    pub suspended_hosts: BTreeMap<String, f64>,
}

impl SiteState {
    pub fn new(cfg: &SiteConfig) -> Self {
        let apps = if cfg.apps.is_empty() {
            None
        } else {
            Some(cfg.apps.iter().cloned().collect())
        };
        SiteState {
            site_id: cfg.site_id.clone(),
            score: cfg.initial_score,
            throttle: cfg.throttle,
            apps,
            jobs_in_flight: 0,
            suspended_hosts: BTreeMap::new(),
        }
    }

    pub fn accepts_app(&self, app: &str) -> bool {
        self.apps.as_ref().map_or(true, |set| set.contains(app))
    }

    pub fn has_capacity(&self) -> bool {
        self.jobs_in_flight < self.throttle
    }

    pub fn suspend_host(&mut self, host: &str, until: f64) {
        let slot = self.suspended_hosts.entry(host.to_string()).or_insert(until);
        if *slot < until {
            *slot = until;
        }
    }

    /// Hosts still suspended at `now`; expired suspensions are dropped.
    pub fn avoid_hosts(&mut self, now: f64) -> Vec<String> {
        self.suspended_hosts.retain(|_, until| *until > now);
        self.suspended_hosts.keys().cloned().collect()
    }
}

/// Pick a site for `apps` (all bundle members must be runnable there),
/// weighted by score over sites with throttle headroom. None if no site
/// currently qualifies.
pub fn select_site(
    sites: &[SiteState],
    apps: &[&str],
    rng: &mut impl Rng,
) -> Option<usize> {
    let valid: Vec<usize> = (0..sites.len())
        .filter(|&i| sites[i].has_capacity() && apps.iter().all(|a| sites[i].accepts_app(a)))
        .collect();
    match valid.len() {
        0 => None,
        1 => Some(valid[0]),
        _ => {
            let total: f64 = valid.iter().map(|&i| sites[i].score).sum();
            let mut x = rng.gen_range(0.0..total);
            for &i in &valid {
                x -= sites[i].score;
                if x < 0.0 {
                    return Some(i);
                }
            }
            Some(*valid.last().expect("nonempty"))
        }
    }
}

pub fn update_score(score: f64, success: bool, cfg: &SchedulerCfg) -> f64 {
    let next = if success { score * cfg.score_up } else { score * cfg.score_down };
    next.clamp(cfg.score_min, cfg.score_max)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadyTask {
    pub task_id: u64,
    pub app: String,
}

/// Pack one window's ready set into bundles of at most `cap` members.
/// Members are grouped by app so every bundle can be placed on any site
/// that runs its app, and order within a group follows ready order.
pub fn cluster(ready: &[ReadyTask], cap: usize) -> Vec<Vec<u64>> {
    let cap = cap.max(1);
    let mut groups: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    let mut group_order: Vec<&str> = Vec::new();
    for t in ready {
        let slot = groups.entry(t.app.as_str()).or_insert_with(|| {
            group_order.push(t.app.as_str());
            Vec::new()
        });
        slot.push(t.task_id);
    }
    let mut bundles = Vec::new();
    for app in group_order {
        for chunk in groups[app].chunks(cap) {
            bundles.push(chunk.to_vec());
        }
    }
    bundles
}

/// Per-task retry bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct RetryState {
    pub failures: u32,
    pub consecutive_at_site: u32,
    pub last_site: Option<usize>,
}

impl RetryState {
    pub fn note_site(&mut self, site: usize) {
        if self.last_site != Some(site) {
            self.consecutive_at_site = 0;
            self.last_site = Some(site);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FailureDecision {
    RetrySameSite,
    /// Too many consecutive failures here; requeue excluding this site.
    RescheduleOtherSite { exclude: usize },
    /// The host looks sick: suspend it and requeue anywhere but on it.
    RequeueAvoidHost { host: String },
    FailPermanent,
}

pub fn handle_failure(
    st: &mut RetryState,
    class: FailureClass,
    site: usize,
    host: &str,
    n_sites: usize,
    cfg: &SchedulerCfg,
) -> FailureDecision {
    st.note_site(site);
    st.failures += 1;
    st.consecutive_at_site += 1;
    if st.failures >= cfg.max_retries {
        return FailureDecision::FailPermanent;
    }
    match class {
        FailureClass::HostError => FailureDecision::RequeueAvoidHost { host: host.to_string() },
        FailureClass::Transient | FailureClass::AppError => {
            if st.consecutive_at_site >= cfg.site_failure_k && n_sites > 1 {
                FailureDecision::RescheduleOtherSite { exclude: site }
            } else {
                FailureDecision::RetrySameSite
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    fn site(id: &str, score: f64) -> SiteState {
        SiteState {
            site_id: id.into(),
            score,
            throttle: 1000,
            apps: None,
            jobs_in_flight: 0,
            suspended_hosts: BTreeMap::new(),
        }
    }

    #[test]
    fn selection_tracks_score_proportion() {
        // Two sites pinned at 2.18 and 2.62. Over 480 draws the split
        // should sit within 3 sigma of the binomial expectation, for
        // every seed tried.
        let sites = vec![site("a", 2.18), site("b", 2.62)];
        let p = 2.18 / (2.18 + 2.62);
        let n = 480.0_f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for seed in 0..20 {
            let mut rng = seeded_rng(seed);
            let mut a = 0usize;
            for _ in 0..480 {
                if select_site(&sites, &["reorient"], &mut rng) == Some(0) {
                    a += 1;
                }
            }
            let dev = (a as f64 - n * p).abs();
            assert!(dev <= 3.0 * sigma, "seed {seed}: {a} picks, dev {dev:.1} > {:.1}", 3.0 * sigma);
        }
    }

    #[test]
    fn selection_respects_app_lists_and_throttle() {
        let mut a = site("a", 5.0);
        a.apps = Some(["reorient".to_string()].into_iter().collect());
        let mut b = site("b", 0.2);
        b.apps = None;
        let sites = vec![a, b];
        let mut rng = seeded_rng(1);
        for _ in 0..50 {
            assert_eq!(select_site(&sites, &["reslice"], &mut rng), Some(1));
        }
        let mut full = site("c", 9.0);
        full.jobs_in_flight = full.throttle;
        let sites = vec![full, site("d", 0.1)];
        assert_eq!(select_site(&sites, &["x"], &mut rng), Some(1));
        let mut both_full = site("e", 1.0);
        both_full.jobs_in_flight = both_full.throttle;
        assert_eq!(select_site(&[both_full], &["x"], &mut rng), None);
    }

    #[test]
    fn score_updates_multiply_and_clamp() {
        let cfg = SchedulerCfg::default();
        assert!((update_score(1.0, true, &cfg) - 1.05).abs() < 1e-12);
        assert!((update_score(1.0, false, &cfg) - 0.8).abs() < 1e-12);
        let mut s = 1.0;
        for _ in 0..200 {
            s = update_score(s, true, &cfg);
        }
        assert_eq!(s, 10.0);
        for _ in 0..200 {
            s = update_score(s, false, &cfg);
        }
        assert_eq!(s, 0.1);
    }

    #[test]
    fn clustering_packs_to_cap() {
        let ready: Vec<ReadyTask> =
            (0..480).map(|i| ReadyTask { task_id: i, app: "reorient".into() }).collect();
        let bundles = cluster(&ready, 60);
        assert_eq!(bundles.len(), 8);
        assert!(bundles.iter().all(|b| b.len() == 60));
        assert_eq!(bundles[0][0], 0);
        assert_eq!(bundles[7][59], 479);
    }

    #[test]
    fn clustering_groups_by_app_and_cap_one_is_identity() {
        let mut ready = Vec::new();
        for i in 0..5 {
            ready.push(ReadyTask { task_id: i, app: if i % 2 == 0 { "a".into() } else { "b".into() } });
        }
        let bundles = cluster(&ready, 10);
        assert_eq!(bundles, vec![vec![0, 2, 4], vec![1, 3]]);
        let singles = cluster(&ready, 1);
        assert_eq!(singles.len(), 5);
        assert!(singles.iter().all(|b| b.len() == 1));
    }

    #[test]
    fn failure_ladder() {
        let cfg = SchedulerCfg::default();
        let mut st = RetryState::default();
        // Two transient failures on site 0 retry in place.
        assert_eq!(
            handle_failure(&mut st, FailureClass::Transient, 0, "h0", 2, &cfg),
            FailureDecision::RetrySameSite
        );
        assert_eq!(
            handle_failure(&mut st, FailureClass::Transient, 0, "h0", 2, &cfg),
            FailureDecision::RetrySameSite
        );
        // The third failure hits max_retries.
        assert_eq!(
            handle_failure(&mut st, FailureClass::Transient, 0, "h0", 2, &cfg),
            FailureDecision::FailPermanent
        );

        // With a higher retry budget, k consecutive failures on one site
        // move the task elsewhere.
        let cfg = SchedulerCfg { max_retries: 10, ..Default::default() };
        let mut st = RetryState::default();
        handle_failure(&mut st, FailureClass::Transient, 1, "h1", 2, &cfg);
        handle_failure(&mut st, FailureClass::Transient, 1, "h1", 2, &cfg);
        assert_eq!(
            handle_failure(&mut st, FailureClass::Transient, 1, "h1", 2, &cfg),
            FailureDecision::RescheduleOtherSite { exclude: 1 }
        );
        // Moving to another site resets the consecutive counter.
        st.note_site(0);
        assert_eq!(st.consecutive_at_site, 0);

        // Host errors requeue away from the host immediately.
        let mut st = RetryState::default();
        assert_eq!(
            handle_failure(&mut st, FailureClass::HostError, 0, "badhost", 1, &cfg),
            FailureDecision::RequeueAvoidHost { host: "badhost".into() }
        );
    }

    #[test]
    fn single_site_never_reschedules_away() {
        let cfg = SchedulerCfg { max_retries: 10, ..Default::default() };
        let mut st = RetryState::default();
        for _ in 0..5 {
            let d = handle_failure(&mut st, FailureClass::Transient, 0, "h", 1, &cfg);
            assert_eq!(d, FailureDecision::RetrySameSite);
        }
    }

    #[test]
    fn host_suspension_expires() {
        let mut s = site("a", 1.0);
        s.suspend_host("h1", 30.0);
        s.suspend_host("h2", 60.0);
        assert_eq!(s.avoid_hosts(10.0), vec!["h1".to_string(), "h2".to_string()]);
        assert_eq!(s.avoid_hosts(45.0), vec!["h2".to_string()]);
        assert!(s.avoid_hosts(90.0).is_empty());
    }

    #[test]
    fn sites_file_parses_and_validates() {
        let ok = r#"[
            {"site_id": "local0", "provider": "local",
             "provider_params": {"max_parallel": 4}, "throttle": 8,
             "apps": ["reorient"], "initial_score": 2.5},
            {"site_id": "sim0", "provider": "simbatch"}
        ]"#;
        let sites = parse_sites(ok).unwrap();
        assert_eq!(sites.len(), 2);
        assert_eq!(sites[0].throttle, 8);
        assert!((sites[0].initial_score - 2.5).abs() < 1e-12);
        assert_eq!(sites[1].throttle, 16);
        assert!((sites[1].initial_score - 1.0).abs() < 1e-12);
        assert!(sites[1].apps.is_empty());

        assert!(parse_sites("[]").unwrap_err().contains("no sites"));
        let dup = r#"[{"site_id": "x", "provider": "local"},
                      {"site_id": "x", "provider": "local"}]"#;
        assert!(parse_sites(dup).unwrap_err().contains("duplicate"));
        let bad = r#"[{"site_id": "x", "provider": "slurm"}]"#;
        assert!(parse_sites(bad).unwrap_err().contains("unknown provider"));
    }
}
