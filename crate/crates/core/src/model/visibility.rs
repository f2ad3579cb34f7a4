use crate::tuple_codec::{Kind, TokenSequence};

/// Which encoder positions may attend to which: `allow[i][j]` means token
/// `i` may look at token `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilityMatrix {
    len: usize,
    allow: Vec<bool>,
}

impl VisibilityMatrix {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.len + j]
    }

    /// Row-major flags, `len * len` long.
    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }
}

/// Attribute-name tokens see every name plus the values of their own
/// attribute; value tokens see every value plus their own attribute's name.
/// Markers follow the span they open, control tokens see and are seen by
/// everything.
pub fn build_visibility(s: &TokenSequence) -> VisibilityMatrix {
    let n = s.len();
    let kinds: Vec<Kind> = (0..n).map(|i| s.effective_kind(i)).collect();
    let mut allow = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let ok = i == j
                || match (kinds[i], kinds[j]) {
                    (Kind::Control, _) | (_, Kind::Control) => true,
                    (Kind::AttrName, Kind::AttrName) | (Kind::AttrValue, Kind::AttrValue) => true,
                    (Kind::AttrName, Kind::AttrValue) | (Kind::AttrValue, Kind::AttrName) => {
                        s.column_ids[i] == s.column_ids[j]
                    }
                    // effective kinds never yield Marker
                    (Kind::Marker, _) | (_, Kind::Marker) => false,
                };
            allow[i * n + j] = ok;
        }
    }
    VisibilityMatrix { len: n, allow }
}
