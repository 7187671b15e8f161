//! Completion codes and session identifiers derived from the service key.

use hmac::{Hmac, Mac};
use sha2::Sha256;

type HmacSha256 = Hmac<Sha256>;

fn mac(key: &[u8], domain: &str, parts: &[&str]) -> [u8; 32] {
    let mut m = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    m.update(domain.as_bytes());
    for p in parts {
        m.update(&[0x1f]);
        m.update(p.as_bytes());
    }
    m.finalize().into_bytes().into()
}

/// Eight base32 characters (40 bits) of HMAC-SHA256 over the study and rater.
pub fn completion_code(key: &[u8], study_id: &str, rater_id: &str) -> String {
    let digest = mac(key, "completion", &[study_id, rater_id]);
    data_encoding::BASE32_NOPAD.encode(&digest[..5])
}

pub fn session_id(key: &[u8], study_id: &str, rater_id: &str) -> String {
    let digest = mac(key, "session", &[study_id, rater_id]);
    format!("s-{}", data_encoding::HEXLOWER.encode(&digest[..8]))
}

/// Fills `{code}` in the redirect template, or appends `cc=<code>` when the
/// template has no placeholder.
pub fn redirect_url(template: &str, code: &str) -> String {
    if template.contains("{code}") {
        template.replace("{code}", code)
    } else if template.is_empty() {
        String::new()
    } else if template.contains('?') {
        format!("{template}&cc={code}")
    } else {
        format!("{template}?cc={code}")
    }
}
