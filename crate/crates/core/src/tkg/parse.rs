use std::io::BufRead;

use chrono::NaiveDate;

use super::{Quadruple, TimeValue, TkgError, Vocabularies};

/// Parses `yyyy-mm-dd` or a bare (possibly negative) integer.
pub fn parse_timestamp(text: &str) -> Option<TimeValue> {
    let text = text.trim();
    if let Ok(v) = text.parse::<i64>() {
        return Some(TimeValue::Step(v));
    }
    let mut parts = text.split('-');
    let (y, m, d) = (parts.next()?, parts.next()?, parts.next()?);
    if parts.next().is_some() || y.len() != 4 || m.len() != 2 || d.len() != 2 {
        return None;
    }
    let date = NaiveDate::from_ymd_opt(y.parse().ok()?, m.parse().ok()?, d.parse().ok()?)?;
    Some(TimeValue::from_date(date))
}

/// Reads tab-separated `subject relation object timestamp` lines.
///
/// Blank lines are skipped. On error the vocabularies are left untouched.
pub fn parse_quadruple_file<R: BufRead>(reader: R, vocabs: &mut Vocabularies) -> Result<Vec<Quadruple>, TkgError> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(TkgError::MalformedLine(line_no));
        }
        let time = parse_timestamp(fields[3]).ok_or(TkgError::BadTimestamp(line_no))?;
        rows.push((
            fields[0].trim().to_string(),
            fields[1].trim().to_string(),
            fields[2].trim().to_string(),
            fields[3].trim().to_string(),
            time,
        ));
    }

    let mut facts = Vec::with_capacity(rows.len());
    for (s, p, o, t, time) in rows {
        let s = vocabs.entities.intern(&s);
        let p = vocabs.relations.intern(&p);
        let o = vocabs.entities.intern(&o);
        let t = vocabs.times.intern(&t, time);
        facts.push(Quadruple::new(s, p, o, t));
    }
    Ok(facts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_icews_line() {
        let mut v = Vocabularies::new();
        let text = "Barack Obama\tSign Formal Agreement\tAfghanistan\t2014-02-07\n";
        let facts = parse_quadruple_file(text.as_bytes(), &mut v).unwrap();
        assert_eq!(facts.len(), 1);
        let q = facts[0];
        assert_eq!(v.entity_name(q.s), "Barack Obama");
        assert_eq!(v.relation_name(q.p), "Sign Formal Agreement");
        assert_eq!(v.entity_name(q.o), "Afghanistan");
        assert_eq!(v.times.entry(q.t).text, "2014-02-07");
        assert_eq!(v.times.entry(q.t).value, TimeValue::Date { year: 2014, month: 2, day: 7 });
    }

    #[test]
    fn empty_stream_leaves_vocab_unchanged() {
        let mut v = Vocabularies::new();
        let facts = parse_quadruple_file("".as_bytes(), &mut v).unwrap();
        assert!(facts.is_empty());
        assert_eq!(v, Vocabularies::new());
    }

    #[test]
    fn three_fields_is_malformed() {
        let mut v = Vocabularies::new();
        let text = "a\tb\t2014-01-01\n";
        assert!(matches!(parse_quadruple_file(text.as_bytes(), &mut v), Err(TkgError::MalformedLine(1))));
        assert!(v.entities.is_empty());
    }

    #[test]
    fn bad_dates_are_rejected() {
        let mut v = Vocabularies::new();
        let text = "a\tr\tb\t1\na\tr\tb\t2014-02-30\n";
        assert!(matches!(parse_quadruple_file(text.as_bytes(), &mut v), Err(TkgError::BadTimestamp(2))));
        assert!(parse_timestamp("2014-2-07").is_none());
        assert!(parse_timestamp("yesterday").is_none());
    }

    #[test]
    fn integer_timestamps_keep_raw_key() {
        let mut v = Vocabularies::new();
        let facts = parse_quadruple_file("a\tr\tb\t194\n".as_bytes(), &mut v).unwrap();
        assert_eq!(v.times.key(facts[0].t), 194);
    }

    #[test]
    fn shared_surface_forms_share_ids() {
        let mut v = Vocabularies::new();
        let text = "a\tr\tb\t1\n\nb\tr\ta\t2\n";
        let facts = parse_quadruple_file(text.as_bytes(), &mut v).unwrap();
        assert_eq!(facts[0].s, facts[1].o);
        assert_eq!(v.num_entities(), 2);
        assert_eq!(v.num_relations(), 1);
    }
}
