use nefele_core::{NodeId, Npid};
use proptest::prelude::*;

proptest! {
    #[test]
    fn display_parse_round_trip(id in any::<u32>(), inc in any::<u32>(), seq in 0u64..(1 << 48)) {
        let n = Npid::new(NodeId::new(id, inc), seq).unwrap();
        let s = n.to_string();
        prop_assert_eq!(s.parse::<Npid>().unwrap(), n);
        let json = serde_json::to_string(&n).unwrap();
        prop_assert_eq!(serde_json::from_str::<Npid>(&json).unwrap(), n);
    }

    #[test]
    fn arbitrary_text_never_panics(s in "\\PC{0,40}") {
        let _ = s.parse::<Npid>();
    }

    #[test]
    fn dotted_noise_never_panics(a in "[0-9+\\- ]{0,25}", b in "[0-9+\\-]{0,25}", c in "[0-9+\\-.]{0,25}") {
        let s = format!("{a}.{b}.{c}");
        if let Ok(n) = s.parse::<Npid>() {
            prop_assert_eq!(n.to_string(), s);
        }
    }

    #[test]
    fn seq_above_48_bits_rejected(seq in (1u64 << 48)..u64::MAX) {
        prop_assert!(Npid::new(NodeId::new(1, 1), seq).is_err());
        let s = format!("1.1.{seq}");
        prop_assert!(s.parse::<Npid>().is_err());
    }
}
