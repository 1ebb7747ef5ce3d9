use super::params::{ParamId, ParamStore};

/// `shadow ← m·shadow + (1 − m)·online` for each `(shadow, online)` pair.
pub fn momentum_update(store: &mut ParamStore, pairs: &[(ParamId, ParamId)], m: f64) {
    for &(shadow, online) in pairs {
        let src = store.get(online).data().to_vec();
        for (s, o) in store.get_mut(shadow).data_mut().iter_mut().zip(src) {
            *s = m * *s + (1.0 - m) * o;
        }
    }
}
