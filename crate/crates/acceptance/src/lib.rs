//! Holds the `acceptance` test target; see `tests/acceptance.rs`. Kept in its
//! own package so it runs after the unit and integration suites of `mmerc`.
