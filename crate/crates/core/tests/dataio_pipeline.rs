use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::NaiveDate;

use spillover::dataio::{build_application_run, ingest, IngestPaths, WeekCalendar};
use spillover::effects::summarize;
use spillover::inference::{fit, FitConfig, ModelVariant};
use spillover::panel::PanelDataset;
use spillover::propensity::{estimate_scores, IndirectMethod};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/county_panel")
}

fn calendar() -> WeekCalendar {
    let d = |m, day| NaiveDate::from_ymd_opt(2020, m, day).unwrap();
    WeekCalendar { anchor: d(3, 6), start: d(3, 6), end: d(5, 28) }
}

fn weekly_counts_by_hand() -> BTreeMap<String, Vec<f64>> {
    let text = std::fs::read_to_string(fixture().join("cases.csv")).unwrap();
    let start = NaiveDate::from_ymd_opt(2020, 3, 6).unwrap();
    let mut daily: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let day = (NaiveDate::parse_from_str(f[1], "%Y-%m-%d").unwrap() - start).num_days() as usize;
        let series = daily.entry(f[0].to_string()).or_insert_with(|| vec![f64::NAN; 84]);
        if day < 84 {
            series[day] = f[2].parse().unwrap();
        }
    }
    daily
        .into_iter()
        .map(|(county, series)| {
            let mut cum = Vec::new();
            let mut last = 0.0;
            for v in series {
                if v.is_finite() {
                    last = v;
                }
                cum.push(last);
            }
            let mut weeks = vec![0.0; 12];
            let mut high = 0.0f64;
            for (i, c) in cum.iter().enumerate() {
                weeks[i / 7] += (c - high).max(0.0);
                high = high.max(*c);
            }
            (county, weeks)
        })
        .collect()
}

#[test]
fn fixture_ingests_to_the_expected_panel() {
    let (ds, report) = ingest(&IngestPaths::in_dir(&fixture()), &calendar()).unwrap();
    assert_eq!((ds.n_regions(), ds.n_times()), (5, 12));
    assert_eq!(report.covariates, vec!["pm25", "temperature"]);
    assert_eq!(report.week_starts.len(), 12);
    assert_eq!(report.imputation.filled, 9);
    assert!(report.imputation.unfilled.is_empty());
    assert!(report.case_clamps >= 1);
    assert_eq!(ds.population[1], 223234.0);
    assert!(ds.x[0].row(0).iter().all(|&v| v == 9.1));

    let by_hand = weekly_counts_by_hand();
    for (j, county) in report.counties.iter().enumerate() {
        for t in 0..12 {
            assert_eq!(ds.y[(j, t)] as f64, by_hand[county][t], "{county} week {t}");
        }
    }
    assert!(ds.a.iter().all(|v| v.is_finite()));
    assert!(ds.a[(0, 11)] < ds.a[(0, 0)]);
}

#[test]
fn ingested_panel_round_trips_and_fits() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, _) = ingest(&IngestPaths::in_dir(&fixture()), &calendar()).unwrap();
    ds.write_dir(dir.path()).unwrap();
    assert_eq!(PanelDataset::read_dir(dir.path()).unwrap(), ds);

    let run = build_application_run(dir.path(), 2, ModelVariant::Full).unwrap();
    assert_eq!(run.config.window_start, 7);
    let sc = estimate_scores(&run.dataset, &run.design, IndirectMethod::NeighborAverage, run.config.isolated_policy).unwrap();
    let cfg = FitConfig { iterations: 3000, burn_in: 1000, ..run.config };
    let s = fit(&run.dataset, Some(&sc), run.variant, &cfg).unwrap();
    let summary = summarize(&s, 50.0).unwrap();
    let names: Vec<&str> = summary.coefficients.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names[..3], ["alpha0", "alpha1.pm25", "alpha1.temperature"]);
    assert!(names.contains(&"alpha2.temperature~"));
    assert_eq!(names[names.len() - 2..], ["delta1", "delta2"]);
    let table = summary.coefficients_markdown();
    assert_eq!(table.lines().count(), 2 + names.len());
}

#[test]
fn calendar_outside_the_data_is_rejected() {
    let d = |m, day| NaiveDate::from_ymd_opt(2020, m, day).unwrap();
    let cal = WeekCalendar { anchor: d(3, 6), start: d(3, 6), end: d(3, 10) };
    assert!(ingest(&IngestPaths::in_dir(&fixture()), &cal).is_err());
    let reversed = WeekCalendar { anchor: d(3, 6), start: d(5, 1), end: d(4, 1) };
    assert!(ingest(&IngestPaths::in_dir(&fixture()), &reversed).is_err());
}

#[test]
fn missing_columns_are_named() {
    let dir = tempfile::tempdir().unwrap();
    for f in ["centroids.csv", "adjacency.csv", "mobility.csv", "covariates.csv"] {
        std::fs::copy(fixture().join(f), dir.path().join(f)).unwrap();
    }
    std::fs::write(dir.path().join("cases.csv"), "county,date,total\n01001,2020-03-06,1\n").unwrap();
    let err = ingest(&IngestPaths::in_dir(dir.path()), &calendar()).unwrap_err();
    assert!(err.to_string().contains("cumulative"), "{err}");
}
