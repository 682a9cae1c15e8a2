/// Single-pass `{slot}` substitution.
///
/// Each entry lists the accepted spellings of one slot and its value. Every
/// slot must occur at least once; the error names the first missing one.
/// Substituted values are copied verbatim and never rescanned, so braces in
/// values survive untouched.
pub(crate) fn fill_slots(template: &str, slots: &[(&[&str], &str)]) -> Result<String, String> {
    for (names, _) in slots {
        if !names.iter().any(|n| template.contains(&format!("{{{n}}}"))) {
            return Err(names[0].to_string());
        }
    }
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'scan: while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos + 1..];
        for (names, value) in slots {
            for name in names.iter() {
                if tail.starts_with(name) && tail[name.len()..].starts_with('}') {
                    out.push_str(value);
                    rest = &tail[name.len() + 1..];
                    continue 'scan;
                }
            }
        }
        out.push('{');
        rest = tail;
    }
    out.push_str(rest);
    Ok(out)
}
