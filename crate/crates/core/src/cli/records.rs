//! CIR logs (JSONL, base64 payload) and result rows (versioned CSV or JSONL).

use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::cirproc::Rejection;
use crate::error::{Error, Result};
use crate::protocol::{CrngParams, ExchangeRecord};
use crate::radio::{Cir, RadioTimestamp, CIR_LEN, TIMESTAMP_MODULUS};
use crate::sim::{Row, Scheme};

/// One logged exchange as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CirLogRecord {
    pub exchange_id: u64,
    pub poll_tx_ticks: u64,
    pub fp_index: f64,
    /// Absent when the PHY header failed to decode.
    pub fp_ticks: Option<u64>,
    pub n_responders: usize,
    /// Little-endian int16 pairs (re, im), base64.
    pub samples: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_m: Option<Vec<f64>>,
}

impl CirLogRecord {
    pub fn from_exchange(r: &ExchangeRecord) -> Self {
        let mut bytes = Vec::with_capacity(r.cir.samples.len() * 4);
        for s in &r.cir.samples {
            bytes.extend_from_slice(&s.re.to_le_bytes());
            bytes.extend_from_slice(&s.im.to_le_bytes());
        }
        CirLogRecord {
            exchange_id: r.exchange_id,
            poll_tx_ticks: r.poll_tx_ts.ticks(),
            fp_index: r.cir.fp_index,
            fp_ticks: (!r.phr_error).then_some(r.cir.fp_timestamp.ticks()),
            n_responders: r.params.n_responders,
            samples: B64.encode(bytes),
            ground_truth_m: r.ground_truth.clone(),
        }
    }

    /// Rebuilds the in-memory record; timing parameters come from `params`.
    pub fn to_exchange(&self, params: &CrngParams) -> std::result::Result<ExchangeRecord, String> {
        if self.poll_tx_ticks >= TIMESTAMP_MODULUS || self.fp_ticks.is_some_and(|t| t >= TIMESTAMP_MODULUS) {
            return Err("timestamp exceeds 40 bits".into());
        }
        let bytes = B64.decode(&self.samples).map_err(|e| format!("bad sample payload: {e}"))?;
        if bytes.len() != CIR_LEN * 4 {
            return Err(format!("expected {} payload bytes, got {}", CIR_LEN * 4, bytes.len()));
        }
        let samples = bytes
            .chunks_exact(4)
            .map(|c| Complex::new(i16::from_le_bytes([c[0], c[1]]), i16::from_le_bytes([c[2], c[3]])))
            .collect();
        if !self.fp_index.is_finite() {
            return Err("fp_index is not finite".into());
        }
        Ok(ExchangeRecord {
            exchange_id: self.exchange_id,
            poll_tx_ts: RadioTimestamp::from_ticks(self.poll_tx_ticks),
            cir: Cir {
                samples,
                fp_index: self.fp_index,
                fp_timestamp: RadioTimestamp::from_ticks(self.fp_ticks.unwrap_or(0)),
                scale: 1.0,
            },
            phr_error: self.fp_ticks.is_none(),
            params: CrngParams {
                n_responders: self.n_responders,
                ..*params
            },
            ground_truth: self.ground_truth_m.clone(),
        })
    }
}

pub fn write_records<W: Write>(mut w: W, records: &[CirLogRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<CirLogRecord>> {
    let mut out = Vec::new();
    for (index, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CirLogRecord = serde_json::from_str(&line).map_err(|e| Error::CorruptRecord {
            index,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Decodes logged records into exchange records.
pub fn decode_records(records: &[CirLogRecord], params: &CrngParams) -> Result<Vec<ExchangeRecord>> {
    records
        .iter()
        .enumerate()
        .map(|(index, r)| r.to_exchange(params).map_err(|message| Error::CorruptRecord { index, message }))
        .collect()
}

pub const ROWS_SCHEMA_VERSION: u32 = 1;
const ROWS_VERSION_LINE: &str = "# crng-rows schema=1";
pub const ROW_HEADER: [&str; 13] = [
    "scheme",
    "position_id",
    "trial",
    "responder",
    "d_true",
    "d_est",
    "valid",
    "reason",
    "x_true",
    "y_true",
    "x_est",
    "y_est",
    "loc_err",
];

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn row_fields(r: &Row) -> [String; 13] {
    [
        r.scheme.name().to_string(),
        r.position_id.to_string(),
        r.trial.to_string(),
        r.responder.to_string(),
        fmt_f(r.d_true),
        fmt_f(r.d_est),
        r.valid.to_string(),
        r.reason.map_or(String::new(), |x| x.name().to_string()),
        fmt_f(r.x_true),
        fmt_f(r.y_true),
        fmt_f(r.x_est),
        fmt_f(r.y_est),
        fmt_f(r.loc_err),
    ]
}

pub fn write_rows_csv<W: Write>(mut w: W, rows: &[Row]) -> Result<()> {
    writeln!(w, "{ROWS_VERSION_LINE}")?;
    let mut csv = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    csv.write_record(ROW_HEADER).map_err(io)?;
    for r in rows {
        csv.write_record(row_fields(r)).map_err(io)?;
    }
    csv.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct JsonRow<'a> {
    scheme: &'a str,
    position_id: usize,
    trial: usize,
    responder: usize,
    d_true: Option<f64>,
    d_est: Option<f64>,
    valid: bool,
    reason: Option<&'a str>,
    x_true: Option<f64>,
    y_true: Option<f64>,
    x_est: Option<f64>,
    y_est: Option<f64>,
    loc_err: Option<f64>,
}

pub fn write_rows_jsonl<W: Write>(mut w: W, rows: &[Row]) -> Result<()> {
    let f = |v: f64| (!v.is_nan()).then_some(v);
    for r in rows {
        let j = JsonRow {
            scheme: r.scheme.name(),
            position_id: r.position_id,
            trial: r.trial,
            responder: r.responder,
            d_true: f(r.d_true),
            d_est: f(r.d_est),
            valid: r.valid,
            reason: r.reason.map(|x| x.name()),
            x_true: f(r.x_true),
            y_true: f(r.y_true),
            x_est: f(r.x_est),
            y_est: f(r.y_est),
            loc_err: f(r.loc_err),
        };
        serde_json::to_writer(&mut w, &j).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a rows CSV, rejecting unknown schema versions.
pub fn read_rows_csv<R: BufRead>(mut r: R) -> Result<Vec<Row>> {
    let mut first = String::new();
    r.read_line(&mut first)?;
    let version = first
        .trim()
        .strip_prefix("# crng-rows schema=")
        .ok_or_else(|| Error::Validation("missing rows schema line".into()))?;
    if version != ROWS_SCHEMA_VERSION.to_string() {
        return Err(Error::Validation(format!("unsupported rows schema version {version}")));
    }
    let mut csv = csv::Reader::from_reader(r);
    let header = csv.headers().map_err(|e| Error::Validation(e.to_string()))?.clone();
    if header.iter().ne(ROW_HEADER.iter().copied()) {
        return Err(Error::Validation("unexpected rows header".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in csv.records().enumerate() {
        let rec = rec.map_err(|e| Error::CorruptRecord {
            index: i,
            message: e.to_string(),
        })?;
        let bad = |m: &str| Error::CorruptRecord {
            index: i,
            message: m.to_string(),
        };
        let f = |k: usize| -> Result<f64> {
            let s = &rec[k];
            if s.is_empty() {
                Ok(f64::NAN)
            } else {
                s.parse().map_err(|_| bad(&format!("bad number in column {}", ROW_HEADER[k])))
            }
        };
        let u = |k: usize| -> Result<usize> { rec[k].parse().map_err(|_| bad(&format!("bad integer in column {}", ROW_HEADER[k]))) };
        rows.push(Row {
            scheme: Scheme::parse(&rec[0]).ok_or_else(|| bad("unknown scheme"))?,
            position_id: u(1)?,
            trial: u(2)?,
            responder: u(3)?,
            d_true: f(4)?,
            d_est: f(5)?,
            valid: rec[6].parse().map_err(|_| bad("bad valid flag"))?,
            reason: if rec[7].is_empty() {
                None
            } else {
                Some(Rejection::parse(&rec[7]).ok_or_else(|| bad("unknown reason"))?)
            },
            x_true: f(8)?,
            y_true: f(9)?,
            x_est: f(10)?,
            y_est: f(11)?,
            loc_err: f(12)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: u64, phr: bool) -> ExchangeRecord {
        let samples = (0..CIR_LEN)
            .map(|k| Complex::new((k as i32 * 37 - 20_000) as i16, (k as i32 * -91 + 15_000) as i16))
            .collect();
        ExchangeRecord {
            exchange_id: id,
            poll_tx_ts: RadioTimestamp::from_ticks(TIMESTAMP_MODULUS - 1 - id),
            cir: Cir {
                samples,
                fp_index: 749.123_456_789_012_3 + id as f64 * 1e-7,
                fp_timestamp: RadioTimestamp::from_ticks(12_345 + id),
                scale: 1.0,
            },
            phr_error: phr,
            params: CrngParams::default(),
            ground_truth: Some(vec![1.0 / 3.0, 2.5]),
        }
    }

    #[test]
    fn empty_round_trip() {
        let mut buf = Vec::new();
        write_records(&mut buf, &[]).unwrap();
        assert!(read_records(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let recs: Vec<CirLogRecord> = (0..500).map(|i| CirLogRecord::from_exchange(&record(i, i % 7 == 0))).collect();
        let mut a = Vec::new();
        write_records(&mut a, &recs).unwrap();
        let back = read_records(&a[..]).unwrap();
        assert_eq!(back, recs);
        let mut b = Vec::new();
        write_records(&mut b, &back).unwrap();
        assert_eq!(a, b);
        let ex = decode_records(&back, &CrngParams::default()).unwrap();
        let orig = record(3, false);
        assert_eq!(ex[3].cir.samples, orig.cir.samples);
        assert_eq!(ex[3].cir.fp_index.to_bits(), orig.cir.fp_index.to_bits());
        assert!(ex[0].phr_error);
    }

    #[test]
    fn truncated_line_is_corrupt() {
        let recs: Vec<CirLogRecord> = (0..3).map(|i| CirLogRecord::from_exchange(&record(i, false))).collect();
        let mut a = Vec::new();
        write_records(&mut a, &recs).unwrap();
        a.truncate(a.len() - 40);
        match read_records(&a[..]) {
            Err(Error::CorruptRecord { index, .. }) => assert_eq!(index, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rows_round_trip_and_version() {
        let rows = vec![
            Row {
                scheme: Scheme::CrngSs,
                position_id: 1,
                trial: 2,
                responder: 3,
                d_true: 0.1 + 0.2,
                d_est: 1.0 / 3.0,
                valid: true,
                reason: None,
                x_true: 1.0,
                y_true: 2.0,
                x_est: 1.01,
                y_est: f64::NAN,
                loc_err: f64::NAN,
            },
            Row {
                scheme: Scheme::Sstwr,
                valid: false,
                reason: Some(Rejection::OutOfChunk),
                ..Row {
                    scheme: Scheme::Sstwr,
                    position_id: 0,
                    trial: 0,
                    responder: 0,
                    d_true: 2.0,
                    d_est: f64::NAN,
                    valid: false,
                    reason: None,
                    x_true: 0.0,
                    y_true: 0.0,
                    x_est: 0.0,
                    y_est: 0.0,
                    loc_err: 0.0,
                }
            },
        ];
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, &rows).unwrap();
        let back = read_rows_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].d_est.to_bits(), rows[0].d_est.to_bits());
        assert!(back[0].y_est.is_nan());
        assert_eq!(back[1].reason, Some(Rejection::OutOfChunk));
        let text = String::from_utf8(buf).unwrap().replace("schema=1", "schema=2");
        assert!(matches!(read_rows_csv(text.as_bytes()), Err(Error::Validation(_))));
    }
}
