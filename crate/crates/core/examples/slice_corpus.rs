//! Cut a time-stamped corpus into 7-day windows ending at survey wave dates,
//! then subsample every window to the smallest one.

use chrono::{Duration, NaiveDate, TimeZone, Utc};
use temporal_adapters::corpus::{cap_to_smallest, slice_weekly, Corpus, Document};

fn main() -> temporal_adapters::Result<()> {
    let start = Utc.with_ymd_and_hms(2023, 1, 1, 0, 0, 0).unwrap();
    // One document every 5 hours, busier towards the end of January.
    let docs: Vec<Document> = (0..400)
        .map(|i| Document {
            text: format!("post number {i}"),
            timestamp: start + Duration::hours(5 * i as i64 - (i as i64 * i as i64) / 200),
            label: None,
        })
        .collect();
    let corpus = Corpus::new(docs);

    let waves: Vec<NaiveDate> = (0..6)
        .map(|w| NaiveDate::from_ymd_opt(2023, 1, 8).unwrap() + Duration::weeks(w))
        .collect();
    let slices = slice_weekly(&corpus, &waves, 7)?;
    let capped = cap_to_smallest(&slices, 42);
    println!("slice  window                    docs  capped");
    for (s, c) in slices.iter().zip(&capped) {
        println!(
            "{:>5}  {} .. {}  {:>4}  {:>6}",
            s.id,
            s.start().date_naive(),
            s.end_date,
            s.documents.len(),
            c.documents.len()
        );
    }
    Ok(())
}
