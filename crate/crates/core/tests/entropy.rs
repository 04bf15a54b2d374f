use nvc::entropy::{discretize_laplace, range_decode, range_encode, y_tables, CdfTable, TOTAL};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample(table: &CdfTable, rng: &mut impl Rng) -> i32 {
    let u = rng.gen_range(0..TOTAL);
    let i = table.cum().partition_point(|&c| c <= u) - 1;
    table.min_symbol() + i as i32
}

fn arb_table() -> impl Strategy<Value = CdfTable> {
    (-40i32..40, prop::collection::vec(1u32..1000, 1..40)).prop_map(|(min, weights)| {
        let total: u32 = weights.iter().sum();
        let budget = TOTAL - weights.len() as u32;
        let mut freqs: Vec<u32> = weights.iter().map(|w| 1 + w * budget / total).collect();
        let sum: u32 = freqs.iter().sum();
        freqs[0] += TOTAL - sum;
        CdfTable::from_frequencies(min, &freqs).unwrap()
    })
}

proptest! {
    #[test]
    fn any_symbols_round_trip(tables in prop::collection::vec(arb_table(), 1..4), picks in prop::collection::vec((0usize..4, 0usize..64), 0..300)) {
        let mut syms = Vec::new();
        let mut refs = Vec::new();
        for (t, s) in picks {
            let table = &tables[t % tables.len()];
            syms.push(table.min_symbol() + (s % table.len()) as i32);
            refs.push(table);
        }
        let bytes = range_encode(&syms, &refs).unwrap();
        prop_assert_eq!(range_decode(&bytes, &refs).unwrap(), syms);
    }

    #[test]
    fn garbage_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64), n in 0usize..50) {
        let t = CdfTable::uniform(-8, 7).unwrap();
        let refs = vec![&t; n];
        let _ = range_decode(&bytes, &refs);
    }
}

#[test]
fn million_symbols_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tables = y_tables();
    let n = 1_000_000;
    let chosen: Vec<&CdfTable> = (0..n).map(|_| &tables[rng.gen_range(0..tables.len())]).collect();
    let syms: Vec<i32> = chosen.iter().map(|t| sample(t, &mut rng)).collect();
    let bytes = range_encode(&syms, &chosen).unwrap();
    assert_eq!(range_decode(&bytes, &chosen).unwrap(), syms);
}

#[test]
fn iid_streams_cost_close_to_the_ideal() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (mean, scale) in [(0.0, 0.3), (0.0, 2.0), (1.5, 7.0), (-3.0, 40.0)] {
        let t = discretize_laplace(mean, scale, -64, 63);
        let syms: Vec<i32> = (0..200_000).map(|_| sample(&t, &mut rng)).collect();
        let ideal: f64 = syms.iter().map(|&s| t.cost_bits(s).unwrap()).sum();
        let bits = 8.0 * range_encode(&syms, &vec![&t; syms.len()]).unwrap().len() as f64;
        assert!(bits <= ideal * 1.01 + 64.0, "scale {scale}: {bits} vs {ideal}");
    }
}
