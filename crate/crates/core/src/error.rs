/// Errors that carry a stable, machine-readable code.
///
/// Codes are the error names used on the wire and by the CLI; each variant of
/// every module error maps to exactly one code.
pub trait Coded {
    fn code(&self) -> &'static str;
}
