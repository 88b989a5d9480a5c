use gabmil::flops::{gabmil_cost, AccountingMode};
use gabmil::simm::GridLayout;
use gabmil::{Gabmil, GabmilConfig, GridCoord, SimmConfig, SimmVariant, Tape, Tensor};
use proptest::prelude::*;

fn run_macs(config: GabmilConfig, coords: &[GridCoord]) -> u64 {
    let n = coords.len();
    let x = Tensor::new(
        vec![n, config.input_dim],
        (0..n * config.input_dim).map(|i| (i as f32 * 0.1).sin()).collect(),
    )
    .unwrap();
    let model = Gabmil::<f32>::new(config, 1).unwrap();
    let mut tape = Tape::new();
    model.forward(&mut tape, &x, &GridLayout::new(coords).unwrap()).unwrap();
    tape.mac_count()
}

fn config_strategy() -> impl Strategy<Value = GabmilConfig> {
    (0usize..4, 1usize..=3, 1usize..=3, 1usize..=2, 2usize..8, 2usize..6, any::<bool>()).prop_map(
        |(v, window, grid, expansion, dc, da, gated)| GabmilConfig {
            input_dim: 5,
            compressed_dim: dc,
            attention_dim: da,
            num_classes: 2,
            gated,
            simm: SimmConfig {
                variant: SimmVariant::ALL[v],
                window,
                grid,
                expansion,
            },
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn counter_matches_analytic_on_dense_grids(config in config_strategy(), a in 1usize..=3, b in 1usize..=3) {
        let unit = config.simm.window * config.simm.grid;
        let (rows, cols) = (unit * a, unit * b);
        let coords: Vec<GridCoord> = (0..rows * cols).map(|k| GridCoord::new((k / cols) as u32, (k % cols) as u32)).collect();
        let macs = run_macs(config, &coords);
        for mode in [AccountingMode::OccupiedOnly, AccountingMode::PaddedGrid] {
            prop_assert_eq!(gabmil_cost(rows * cols, rows, cols, &config, mode).unwrap().total(), macs);
        }
    }

    #[test]
    fn counter_matches_padded_accounting_on_sparse_grids(
        config in config_strategy(),
        rows in 1usize..=7,
        cols in 1usize..=7,
        keep in prop::collection::vec(any::<bool>(), 49),
    ) {
        let mut coords: Vec<GridCoord> = (0..rows * cols)
            .filter(|&k| keep[k])
            .map(|k| GridCoord::new((k / cols) as u32, (k % cols) as u32))
            .collect();
        coords.push(GridCoord::new(0, 0));
        coords.push(GridCoord::new((rows - 1) as u32, (cols - 1) as u32));
        coords.sort_by_key(|c| (c.row, c.col));
        coords.dedup();
        let macs = run_macs(config, &coords);
        let padded = gabmil_cost(coords.len(), rows, cols, &config, AccountingMode::PaddedGrid).unwrap().total();
        let occupied = gabmil_cost(coords.len(), rows, cols, &config, AccountingMode::OccupiedOnly).unwrap().total();
        prop_assert_eq!(padded, macs);
        prop_assert!(occupied <= padded);
    }
}
