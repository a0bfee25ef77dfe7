use mlrank_core::classify::*;
use mlrank_core::formulation::*;
use mlrank_core::model::*;
use mlrank_core::monodromy::*;
use mlrank_core::tracker::*;

fn main() {
    let u = DataMatrix::general(3, 3, vec![4.0, 1.0, 2.0, 2.0, 6.0, 1.0, 1.0, 3.0, 5.0]).unwrap();
    let model = RankModel::general(3, 3, 2).unwrap();
    let archive = monodromy_solve(model, &MonodromyOptions::default(), 17).unwrap();
    println!("archive: {} solutions", archive.ml_degree);
    let u_norm = u.scaled(10.0 / u.total());
    let target = SystemData::from_data(&u_norm);
    let plain = build_system(model, false, 0).unwrap();
    let sys = build_system(model, true, 23).unwrap();
    let xs: Vec<_> = archive.solutions.iter().map(|x| plain.convert_solution(&sys, x).unwrap()).collect();
    let res = transport_solutions(&sys, &archive.u0, &xs, &target, 29, &TrackerOptions::default()).unwrap();
    for (i, r) in res.iter().enumerate() {
        let pt = classify_point(&u, &sys, &target, &r.endpoint).unwrap();
        println!(
            "{i}: status={:?} real={} pos={} rank={} ext={:?} logL={:?} lamres={:?}",
            r.status, pt.is_real, pt.is_positive, pt.numerical_rank, pt.extremum, pt.log_l, pt.multiplier_residual
        );
    }
}
