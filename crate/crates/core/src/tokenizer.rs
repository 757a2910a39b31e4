//! Byte-level tokenizer with a handful of special symbols.

pub type TokenId = u32;

pub const AUDIO_START: TokenId = 256;
pub const AUDIO_END: TokenId = 257;
pub const BOS: TokenId = 258;
pub const EOS: TokenId = 259;
pub const PAD: TokenId = 260;

pub const VOCAB_SIZE: usize = 261;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(TokenId::from).collect()
    }

    /// Decodes byte tokens, dropping specials. Invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let bytes: Vec<u8> = ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id >= 256
    }

    pub fn symbol(&self, id: TokenId) -> String {
        match id {
            AUDIO_START => "<audio>".into(),
            AUDIO_END => "</audio>".into(),
            BOS => "<bos>".into(),
            EOS => "<eos>".into(),
            PAD => "<pad>".into(),
            b if b < 256 => format!("{:?}", b as u8 as char),
            other => format!("<unk:{other}>"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trips_any_string(s in ".*") {
            let tok = Tokenizer;
            let ids = tok.encode(&s);
            prop_assert!(ids.iter().all(|&id| !tok.is_special(id)));
            prop_assert_eq!(tok.decode(&ids), s);
        }
    }

    #[test]
    fn specials_are_dropped_on_decode() {
        let tok = Tokenizer;
        let mut ids = vec![AUDIO_START, AUDIO_END];
        ids.extend(tok.encode("A4"));
        ids.push(EOS);
        assert_eq!(tok.decode(&ids), "A4");
        assert_eq!(tok.vocab_size(), 261);
    }
}
