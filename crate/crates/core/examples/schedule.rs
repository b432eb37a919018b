//! Prior-switching schedule: direct-loss weights over the dynamic stage and
//! the empirical video-SDS / BSD split.

use hybrid4d::trainer::{draw_choice, iteration_rng, schedule_weights, DistillChoice, ScheduleSpec, Stage};

fn main() -> hybrid4d::Result<()> {
    let spec = ScheduleSpec::default();
    let n = spec.dynamic_iterations;
    println!("{:>6} {:>9} {:>8} {:>7} {:>6}", "iter", "rgb", "mask", "flow", "p");
    for i in (0..=n).step_by(n / 10) {
        let w = schedule_weights(&spec, i)?;
        println!("{i:6} {:9.2} {:8.3} {:7.3} {:6.2}", w.rgb, w.mask, w.flow, w.sds_probability);
    }
    let video = (0..n)
        .filter(|&i| {
            let p = spec.sds_probability.at(i, n);
            draw_choice(&mut iteration_rng(0, Stage::Dynamic, i), p) == DistillChoice::VideoSds
        })
        .count();
    println!("video SDS chosen in {video} of {n} iterations");
    Ok(())
}
