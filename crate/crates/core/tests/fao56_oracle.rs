mod common;

use std::time::Duration;

use common::fao56::{compare, rows, site};
use vinestress::meteo::{compute_etref_hourly, daily_from_hourly, vpd};

#[test]
fn hourly_vpd_and_etref_match_the_worksheet() {
    let o = compare();
    assert_eq!(o.hours, 72);
    assert!(o.max_vpd_err <= 1e-6, "{o:?}");
    assert!(o.max_et_err <= 1e-6, "{o:?}");
    assert!(o.elapsed < Duration::from_secs(1), "{o:?}");
}

#[test]
fn worksheet_nights_are_near_zero_and_days_are_not() {
    let site = site();
    for r in rows() {
        let et = compute_etref_hourly(&r.record(), &site).unwrap();
        if r.solar_radiation == 0.0 {
            assert!(et < 0.1, "{} {et}", r.timestamp);
        }
        if r.solar_radiation > 600.0 {
            assert!(et > 0.3, "{} {et}", r.timestamp);
        }
    }
}

#[test]
fn vpd_is_monotone_in_temperature_at_fixed_humidity() {
    let mut prev = 0.0;
    for t in 0..45 {
        let v = vpd(t as f64, 55.0).unwrap();
        assert!(v > prev);
        prev = v;
    }
    assert!(vpd(20.0, 100.0).unwrap().abs() < 1e-12);
}

#[test]
fn three_days_aggregate_to_three_daily_records() {
    let recs: Vec<_> = rows().iter().map(|r| r.record()).collect();
    let daily = daily_from_hourly(&recs, &site()).unwrap();
    assert_eq!(daily.days.len(), 3);
    let by_day: Vec<f64> = rows()
        .chunks(24)
        .map(|c| c.iter().map(|r| r.vpd_kpa).fold(f64::MIN, f64::max))
        .collect();
    for (d, want) in daily.days.iter().zip(by_day) {
        assert!((d.vpd_max - want).abs() < 1e-6, "{} {} {want}", d.date, d.vpd_max);
        assert!(d.et_ref > 2.0 && d.et_ref < 9.0, "{} {}", d.date, d.et_ref);
    }
}
