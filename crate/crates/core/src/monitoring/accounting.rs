//! Usage accounting over the collector's record log: f-close transfers and
//! bytes per namespace and UTC month.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::DateTime;
use serde::Serialize;

use crate::model::{Component, Event, MonitorRecord, ObjectPath};
use crate::wire::decode_monitor_record;

pub const UNKNOWN_NAMESPACE: &str = "/_unknown";
pub const OTHER_ROW: &str = "Other";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Usage {
    pub transfers: u64,
    pub bytes: u64,
}

impl Usage {
    fn add(&mut self, other: Usage) {
        self.transfers += other.transfers;
        self.bytes += other.bytes;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccountingTable {
    /// Keyed by (namespace prefix, "YYYY-MM").
    pub rows: BTreeMap<(String, String), Usage>,
    pub skipped_lines: u64,
}

impl AccountingTable {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn totals(&self) -> Usage {
        let mut total = Usage::default();
        for usage in self.rows.values() {
            total.add(*usage);
        }
        total
    }

    pub fn get(&self, namespace: &str, month: &str) -> Option<Usage> {
        self.rows.get(&(namespace.to_owned(), month.to_owned())).copied()
    }

    /// Usage per namespace summed over months.
    pub fn by_namespace(&self) -> BTreeMap<String, Usage> {
        let mut out: BTreeMap<String, Usage> = BTreeMap::new();
        for ((ns, _), usage) in &self.rows {
            out.entry(ns.clone()).or_default().add(*usage);
        }
        out
    }

    #[cfg(feature = "parallel")]
    fn merge(mut self, other: AccountingTable) -> AccountingTable {
        for (key, usage) in other.rows {
            self.rows.entry(key).or_default().add(usage);
        }
        self.skipped_lines += other.skipped_lines;
        self
    }
}

/// Which f-close records count. Both origins and caches report a close per
/// transfer; counting only one component keeps a cache miss from being
/// counted twice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregateFilter {
    pub month: Option<String>,
    pub component: Option<Component>,
}

impl Default for AggregateFilter {
    fn default() -> Self {
        Self {
            month: None,
            component: Some(Component::Cache),
        }
    }
}

impl AggregateFilter {
    pub fn all_components() -> Self {
        Self {
            month: None,
            component: None,
        }
    }

    pub fn with_month(mut self, month: impl Into<String>) -> Self {
        self.month = Some(month.into());
        self
    }

    fn admits(&self, record: &MonitorRecord, month: &str) -> bool {
        record.event == Event::Close
            && self.component.is_none_or(|c| c == record.component)
            && self.month.as_deref().is_none_or(|m| m == month)
    }
}

/// "YYYY-MM" of a millisecond timestamp in UTC.
pub fn utc_month(ts_ms: u64) -> String {
    i64::try_from(ts_ms)
        .ok()
        .and_then(DateTime::from_timestamp_millis)
        .map(|t| t.format("%Y-%m").to_string())
        .unwrap_or_else(|| "invalid".to_owned())
}

/// Longest component-boundary prefix of `path` among `prefixes`.
pub fn namespace_of<'a>(path: &ObjectPath, prefixes: &'a [ObjectPath]) -> Option<&'a ObjectPath> {
    prefixes
        .iter()
        .filter(|p| path.is_under(p))
        .max_by_key(|p| p.as_str().len())
}

/// Namespace prefixes to use when no topology is at hand: the first path
/// component of every path in the log.
pub fn first_component_prefixes(log: &str) -> Vec<ObjectPath> {
    let mut out: Vec<ObjectPath> = log
        .lines()
        .filter_map(|line| decode_monitor_record(line.as_bytes()).ok())
        .filter_map(|r| r.path.components().next().map(|c| format!("/{c}")))
        .filter_map(|p| ObjectPath::parse(&p).ok())
        .collect();
    out.sort();
    out.dedup();
    out
}

fn account_line(table: &mut AccountingTable, line: &str, prefixes: &[ObjectPath], filter: &AggregateFilter) {
    if line.trim().is_empty() {
        return;
    }
    let Ok(record) = decode_monitor_record(line.as_bytes()) else {
        table.skipped_lines += 1;
        return;
    };
    let month = utc_month(record.ts_ms);
    if !filter.admits(&record, &month) {
        return;
    }
    let ns = namespace_of(&record.path, prefixes)
        .map(|p| p.as_str().to_owned())
        .unwrap_or_else(|| UNKNOWN_NAMESPACE.to_owned());
    table.rows.entry((ns, month)).or_default().add(Usage {
        transfers: 1,
        bytes: record.bytes,
    });
}

pub fn aggregate_sequential(log: &str, prefixes: &[ObjectPath], filter: &AggregateFilter) -> AccountingTable {
    let mut table = AccountingTable::default();
    for line in log.lines() {
        account_line(&mut table, line, prefixes, filter);
    }
    table
}

#[cfg(feature = "parallel")]
pub fn aggregate_parallel(log: &str, prefixes: &[ObjectPath], filter: &AggregateFilter) -> AccountingTable {
    use rayon::prelude::*;
    let lines: Vec<&str> = log.lines().collect();
    lines
        .par_chunks(2048)
        .map(|chunk| {
            let mut table = AccountingTable::default();
            for line in chunk {
                account_line(&mut table, line, prefixes, filter);
            }
            table
        })
        .reduce(AccountingTable::default, AccountingTable::merge)
}

/// Aggregates the log, in parallel when the `parallel` feature is on.
pub fn aggregate(log: &str, prefixes: &[ObjectPath], filter: &AggregateFilter) -> AccountingTable {
    #[cfg(feature = "parallel")]
    {
        aggregate_parallel(log, prefixes, filter)
    }
    #[cfg(not(feature = "parallel"))]
    {
        aggregate_sequential(log, prefixes, filter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Transfers,
    Bytes,
}

impl Metric {
    pub fn of(self, usage: &Usage) -> u64 {
        match self {
            Metric::Transfers => usage.transfers,
            Metric::Bytes => usage.bytes,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "transfers" => Ok(Metric::Transfers),
            "bytes" => Ok(Metric::Bytes),
            other => Err(format!("unknown metric {other:?} (bytes|transfers)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankedRow {
    pub namespace: String,
    pub usage: Usage,
}

/// Namespaces ranked by `metric` (descending, ties by name), the rest summed
/// into an "Other" row. `n` of zero is treated as one.
pub fn top_namespaces(table: &AccountingTable, n: usize, metric: Metric) -> Vec<RankedRow> {
    let mut rows: Vec<RankedRow> = table
        .by_namespace()
        .into_iter()
        .map(|(namespace, usage)| RankedRow { namespace, usage })
        .collect();
    rows.sort_by(|a, b| {
        metric
            .of(&b.usage)
            .cmp(&metric.of(&a.usage))
            .then_with(|| a.namespace.cmp(&b.namespace))
    });
    let n = n.max(1);
    if rows.len() > n {
        let mut other = Usage::default();
        for row in rows.drain(n..) {
            other.add(row.usage);
        }
        rows.push(RankedRow {
            namespace: OTHER_ROW.to_owned(),
            usage: other,
        });
    }
    rows
}

pub fn render_text(rows: &[RankedRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.namespace.len())
        .chain(["NAMESPACE".len()])
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}", "NAMESPACE", "TRANSFERS", "BYTES");
    for r in rows {
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>16}", r.namespace, r.usage.transfers, r.usage.bytes);
    }
    out
}

pub fn render_csv(rows: &[RankedRow]) -> String {
    let mut out = String::from("namespace,transfers,bytes\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.namespace, r.usage.transfers, r.usage.bytes);
    }
    out
}

/// Month-by-month breakdown as CSV.
pub fn render_table_csv(table: &AccountingTable) -> String {
    let mut out = String::from("namespace,month,transfers,bytes\n");
    for ((ns, month), u) in &table.rows {
        let _ = writeln!(out, "{ns},{month},{},{}", u.transfers, u.bytes);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::encode_monitor_record;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const OCT_2024: u64 = 1_728_000_000_000;

    fn p(s: &str) -> ObjectPath {
        ObjectPath::parse(s).unwrap()
    }

    fn close(path: &str, bytes: u64, ts: u64, component: Component, xfer: &str) -> String {
        let r = MonitorRecord::new(Event::Close, ts, "h", component, &p(path), bytes, "c", xfer)
            .with_duration(1);
        String::from_utf8(encode_monitor_record(&r).unwrap()).unwrap()
    }

    fn prefixes() -> Vec<ObjectPath> {
        vec![p("/ligo"), p("/nova"), p("/ligo/frames")]
    }

    #[test]
    fn sums_close_records_per_namespace() {
        let log = [
            close("/ligo/a", 100, OCT_2024, Component::Cache, "1"),
            close("/ligo/b", 50, OCT_2024, Component::Cache, "2"),
            close("/nova/c", 10, OCT_2024, Component::Cache, "3"),
        ]
        .join("\n");
        let t = aggregate(&log, &prefixes(), &AggregateFilter::default());
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.get("/ligo", "2024-10"), Some(Usage { transfers: 2, bytes: 150 }));
        assert_eq!(t.get("/nova", "2024-10"), Some(Usage { transfers: 1, bytes: 10 }));

        let top = top_namespaces(&t, 1, Metric::Bytes);
        assert_eq!(top.len(), 2);
        assert_eq!((top[0].namespace.as_str(), top[0].usage.bytes), ("/ligo", 150));
        assert_eq!((top[1].namespace.as_str(), top[1].usage.bytes), ("Other", 10));
        assert_eq!(top_namespaces(&t, 2, Metric::Bytes).len(), 2);
        assert_eq!(top_namespaces(&t, 9, Metric::Bytes).len(), 2);
    }

    #[test]
    fn empty_log_and_corrupt_lines() {
        assert!(aggregate("", &prefixes(), &AggregateFilter::default()).is_empty());
        let log = format!("not json\n{}\n{{\"stream\":\"f\"}}\n", close("/x/y", 5, 0, Component::Cache, "1"));
        let t = aggregate(&log, &prefixes(), &AggregateFilter::default());
        assert_eq!(t.skipped_lines, 2);
        assert_eq!(t.get(UNKNOWN_NAMESPACE, "1970-01"), Some(Usage { transfers: 1, bytes: 5 }));
    }

    #[test]
    fn filters_component_month_and_event() {
        let open = MonitorRecord::new(Event::Open, OCT_2024, "h", Component::Cache, &p("/ligo/a"), 0, "c", "9");
        let log = [
            close("/ligo/a", 1, OCT_2024, Component::Origin, "1"),
            close("/ligo/a", 2, OCT_2024, Component::Cache, "2"),
            close("/ligo/a", 4, OCT_2024 - 40 * 86_400_000, Component::Cache, "3"),
            String::from_utf8(encode_monitor_record(&open).unwrap()).unwrap(),
        ]
        .join("\n");
        let t = aggregate(&log, &prefixes(), &AggregateFilter::default().with_month("2024-10"));
        assert_eq!(t.totals(), Usage { transfers: 1, bytes: 2 });
        let all = aggregate(&log, &prefixes(), &AggregateFilter::all_components());
        assert_eq!(all.totals(), Usage { transfers: 3, bytes: 7 });
        assert_eq!(all.rows.len(), 2);
    }

    #[test]
    fn longest_prefix_wins() {
        let log = close("/ligo/frames/x", 3, OCT_2024, Component::Cache, "1");
        let t = aggregate(&log, &prefixes(), &AggregateFilter::default());
        assert!(t.get("/ligo/frames", "2024-10").is_some());
    }

    #[test]
    fn month_boundaries_are_utc() {
        assert_eq!(utc_month(0), "1970-01");
        // 2024-03-01T00:00:00Z and one millisecond earlier
        assert_eq!(utc_month(1_709_251_200_000), "2024-03");
        assert_eq!(utc_month(1_709_251_199_999), "2024-02");
    }

    fn synthetic_log(seed: u64, n: usize) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let paths = ["/ligo/a", "/ligo/frames/b", "/nova/c", "/dune/d", "/nova"];
        let mut lines = Vec::with_capacity(n);
        for i in 0..n {
            let path = paths[rng.gen_range(0..paths.len())];
            let comp = if rng.gen_bool(0.8) { Component::Cache } else { Component::Origin };
            let ts = OCT_2024 + rng.gen_range(0..90u64) * 86_400_000;
            if rng.gen_bool(0.01) {
                lines.push("{\"broken\":".to_owned());
            } else {
                lines.push(close(path, rng.gen_range(0..1_000_000), ts, comp, &i.to_string()));
            }
        }
        lines.join("\n")
    }

    /// Naive recount: parse each line as generic JSON and tally by hand.
    fn recount(log: &str, prefixes: &[&str]) -> BTreeMap<(String, String), (u64, u64)> {
        let mut out = BTreeMap::new();
        for line in log.lines() {
            let Ok(v) = serde_json::from_str::<serde_json::Value>(line) else { continue };
            if v.get("event").and_then(|e| e.as_str()) != Some("close") || v["component"] != "cache" {
                continue;
            }
            let path = v["path"].as_str().unwrap();
            let mut best: Option<&str> = None;
            for pre in prefixes {
                let under = path == *pre || path.starts_with(&format!("{pre}/"));
                if under && best.is_none_or(|b| pre.len() > b.len()) {
                    best = Some(pre);
                }
            }
            let secs = v["ts_ms"].as_u64().unwrap() / 1000;
            let days = secs / 86_400;
            let (y, m) = civil_from_days(days as i64);
            let e = out
                .entry((best.unwrap_or("/_unknown").to_owned(), format!("{y:04}-{m:02}")))
                .or_insert((0, 0));
            e.0 += 1;
            e.1 += v["bytes"].as_u64().unwrap();
        }
        out
    }

    // Howard Hinnant's days-to-civil algorithm.
    fn civil_from_days(z: i64) -> (i64, u32) {
        let z = z + 719_468;
        let era = z.div_euclid(146_097);
        let doe = z - era * 146_097;
        let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
        let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
        let mp = (5 * doy + 2) / 153;
        let m = if mp < 10 { mp + 3 } else { mp - 9 };
        let y = yoe + era * 400 + i64::from(m <= 2);
        (y, m as u32)
    }

    #[test]
    fn matches_brute_force_recount() {
        let log = synthetic_log(7, 10_000);
        let t = aggregate(&log, &prefixes(), &AggregateFilter::default());
        let oracle = recount(&log, &["/ligo", "/nova", "/ligo/frames"]);
        let got: BTreeMap<_, _> = t.rows.iter().map(|(k, u)| (k.clone(), (u.transfers, u.bytes))).collect();
        assert_eq!(got, oracle);
        assert_eq!(t, aggregate_sequential(&log, &prefixes(), &AggregateFilter::default()));
    }

    proptest! {
        #[test]
        fn ranking_matches_sort_oracle(
            usages in proptest::collection::btree_map("/[a-e]{1,2}", (0u64..20, 0u64..20), 0..12),
            n in 1usize..15,
            by_bytes in any::<bool>(),
        ) {
            let mut table = AccountingTable::default();
            for (ns, (t, b)) in &usages {
                table.rows.insert((ns.clone(), "2024-10".into()), Usage { transfers: *t, bytes: *b });
            }
            let metric = if by_bytes { Metric::Bytes } else { Metric::Transfers };
            let got = top_namespaces(&table, n, metric);

            let mut oracle: Vec<(String, u64, u64)> =
                usages.iter().map(|(k, (t, b))| (k.clone(), *t, *b)).collect();
            let key = |r: &(String, u64, u64)| if by_bytes { r.2 } else { r.1 };
            // insertion sort, descending by metric then ascending by name
            for i in 1..oracle.len() {
                let mut j = i;
                while j > 0 && (key(&oracle[j]) > key(&oracle[j - 1])
                    || (key(&oracle[j]) == key(&oracle[j - 1]) && oracle[j].0 < oracle[j - 1].0))
                {
                    oracle.swap(j, j - 1);
                    j -= 1;
                }
            }
            let head: Vec<_> = oracle.iter().take(n).map(|r| (r.0.clone(), r.1, r.2)).collect();
            let got_head: Vec<_> = got.iter().take(n.min(oracle.len()))
                .map(|r| (r.namespace.clone(), r.usage.transfers, r.usage.bytes)).collect();
            prop_assert_eq!(got_head, head);
            if oracle.len() > n {
                let last = got.last().unwrap();
                prop_assert_eq!(last.namespace.as_str(), OTHER_ROW);
                let rest: (u64, u64) = oracle[n..].iter().fold((0, 0), |a, r| (a.0 + r.1, a.1 + r.2));
                prop_assert_eq!((last.usage.transfers, last.usage.bytes), rest);
            } else {
                prop_assert_eq!(got.len(), oracle.len());
            }
        }

        #[test]
        fn totals_are_preserved(seed in 0u64..50) {
            let log = synthetic_log(seed, 300);
            let t = aggregate(&log, &prefixes(), &AggregateFilter::default());
            let sum: u64 = top_namespaces(&t, 2, Metric::Bytes).iter().map(|r| r.usage.bytes).sum();
            prop_assert_eq!(sum, t.totals().bytes);
        }
    }
}
