//! Loss-oracle and gradient-check batteries run by both the focused test
//! targets and the acceptance target.

use std::f64::consts::LN_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retinex_gan::adversarial::{
    bce, bce_const, cycle_loss_r, cycle_loss_r_graph, cycle_loss_s, cycle_loss_s_graph, discriminator_loss_graph,
    discriminator_losses, generator_losses, generator_losses_graph, run_cycle, CycleNets, GanLossWeights,
    Trainable,
};
use retinex_gan::autograd::Graph;
use retinex_gan::decomposition::{decomp_loss_graph, DecompLossWeights};
use retinex_gan::enhancement::Direction;
use retinex_gan::nn::ParamSet;
use retinex_gan::{DecompNet, EnhanceNet, PatchDiscriminator, Tensor};

use super::*;

/// `(label, library value, oracle value)`.
pub type OracleCase = (String, f64, f64);

pub fn loss_oracle_cases() -> Vec<OracleCase> {
    let mut cases = Vec::new();
    let mut push = |label: String, got: f64, want: f64| cases.push((label, got, want));

    for size in [2, 8] {
        let half = Tensor::full(&[1, 1, size, size], 0.5);
        for t in [0.0, 1.0] {
            let target = Tensor::full(&[1, 1, size, size], t);
            push(format!("bce(0.5, {t}) {size}x{size} = ln 2"), bce(&half, &target).unwrap(), LN_2);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(size as u64);
        let mut pred = rand_tensor(&[2, 1, size, size], 0.0, 1.0, &mut rng);
        // Saturated entries exercise the clamp.
        pred.data_mut()[0] = 0.0;
        pred.data_mut()[1] = 1.0;
        let target = rand_tensor(&[2, 1, size, size], 0.0, 1.0, &mut rng);
        push(
            format!("bce random {size}x{size}"),
            bce(&pred, &target).unwrap(),
            oracle_bce(pred.data(), target.data()),
        );

        let st = random_state(2, size, 40 + size as u64);
        let cs = oracle_cycle_s(&st);
        let cr = oracle_cycle_r(&st);
        push(format!("cycle_S {size}x{size}"), cycle_loss_s(&st).unwrap(), cs);
        push(format!("cycle_R {size}x{size}"), cycle_loss_r(&st).unwrap(), cr);

        let mut dh = PatchDiscriminator::<f64>::new(&pixel_disc_spec(), "d_high", 5).unwrap();
        let mut dl = PatchDiscriminator::<f64>::new(&pixel_disc_spec(), "d_low", 6).unwrap();
        dh.params_mut().get_mut("d_high.conv0.bias").unwrap().data_mut()[0] = 0.3;
        dl.params_mut().get_mut("d_low.conv0.bias").unwrap().data_mut()[0] = -0.2;
        let f = st.forward.as_ref().unwrap();
        let b = st.backward.as_ref().unwrap();
        let ones = |n: usize| vec![1.0; n];
        let zeros = |n: usize| vec![0.0; n];
        let sh = oracle_pixel_disc(dh.params(), "d_high", &f.s_high_p);
        let sl = oracle_pixel_disc(dl.params(), "d_low", &b.s_low_p);
        let (lg, lf) = generator_losses(&st, &dh, &dl).unwrap();
        push(format!("L_G {size}x{size}"), lg, cs + cr + oracle_bce(&sh, &ones(sh.len())));
        push(format!("L_F {size}x{size}"), lf, cs + cr + oracle_bce(&sl, &ones(sl.len())));

        let mut rng = ChaCha8Rng::seed_from_u64(90 + size as u64);
        let real_high = rand_tensor(&[2, 3, size, size], 0.0, 1.0, &mut rng);
        let real_low = rand_tensor(&[2, 3, size, size], 0.0, 1.0, &mut rng);
        let rh = oracle_pixel_disc(dh.params(), "d_high", &real_high);
        let rl = oracle_pixel_disc(dl.params(), "d_low", &real_low);
        let (ldh, ldl) = discriminator_losses(&st, &dh, &dl, &real_high, &real_low).unwrap();
        push(
            format!("L_D_high {size}x{size}"),
            ldh,
            oracle_bce(&sh, &zeros(sh.len())) + oracle_bce(&rh, &ones(rh.len())),
        );
        push(
            format!("L_D_low {size}x{size}"),
            ldl,
            oracle_bce(&sl, &zeros(sl.len())) + oracle_bce(&rl, &ones(rl.len())),
        );
    }

    // A discriminator with all-zero parameters outputs 0.5 everywhere.
    let st = random_state(1, 8, 3);
    let zero = |prefix: &str| {
        let mut d = PatchDiscriminator::<f64>::new(&tiny_disc(), prefix, 1).unwrap();
        let names: Vec<String> = d.params().names().cloned().collect();
        for n in names {
            d.params_mut().get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        d
    };
    let (dh, dl) = (zero("d_high"), zero("d_low"));
    let f = st.forward.as_ref().unwrap();
    let (ldh, ldl) = discriminator_losses(&st, &dh, &dl, &f.s_low, &f.s_low).unwrap();
    push("L_D_high at 0.5 = 2 ln 2".into(), ldh, 2.0 * LN_2);
    push("L_D_low at 0.5 = 2 ln 2".into(), ldl, 2.0 * LN_2);
    cases
}

/// Every network of one cycle plus fixed inputs, at 8×8.
#[derive(Clone)]
pub struct TinyPipeline {
    pub decomp: DecompNet<f64>,
    pub g2: EnhanceNet<f64>,
    pub f2: EnhanceNet<f64>,
    pub d_high: PatchDiscriminator<f64>,
    pub d_low: PatchDiscriminator<f64>,
    pub s_low: Tensor<f64>,
    pub s_high: Tensor<f64>,
    pub pred: ParamSet<f64>,
}

impl TinyPipeline {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pred = ParamSet::new();
        pred.insert("pred", rand_tensor(&[2, 1, 8, 8], 0.05, 0.95, &mut rng));
        Self {
            decomp: DecompNet::new(tiny_decomp(), seed + 1).unwrap(),
            g2: EnhanceNet::new(&tiny_unet(), Direction::LowToHigh, seed + 2).unwrap(),
            f2: EnhanceNet::new(&tiny_unet(), Direction::HighToLow, seed + 3).unwrap(),
            d_high: PatchDiscriminator::new(&tiny_disc(), "d_high", seed + 4).unwrap(),
            d_low: PatchDiscriminator::new(&tiny_disc(), "d_low", seed + 5).unwrap(),
            s_low: rand_tensor(&[2, 3, 8, 8], 0.0, 0.4, &mut rng),
            s_high: rand_tensor(&[2, 3, 8, 8], 0.2, 1.0, &mut rng),
            pred,
        }
    }

    fn nets(&self) -> CycleNets<'_, f64> {
        CycleNets {
            decomp: &self.decomp,
            g2: &self.g2,
            f2: &self.f2,
        }
    }

    fn cycle(&self, g: &mut Graph<f64>) -> retinex_gan::adversarial::CycleVars {
        let sl = g.constant(self.s_low.clone());
        let sh = g.constant(self.s_high.clone());
        let all = Trainable {
            decomp: true,
            enhancers: true,
        };
        run_cycle(g, self.nets(), sl, sh, all).unwrap()
    }
}

fn generators(p: &mut TinyPipeline) -> Vec<&mut ParamSet<f64>> {
    vec![p.decomp.params_mut(), p.g2.params_mut(), p.f2.params_mut()]
}

fn discriminators(p: &mut TinyPipeline) -> Vec<&mut ParamSet<f64>> {
    vec![p.d_high.params_mut(), p.d_low.params_mut()]
}

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_SAMPLES: usize = 24;

pub fn gradcheck_cases() -> Vec<(&'static str, GradCheck)> {
    let p = TinyPipeline::new(11);
    let w = GanLossWeights::default();
    let run = |sets: fn(&mut TinyPipeline) -> Vec<&mut ParamSet<f64>>,
               loss: &dyn Fn(&TinyPipeline, &mut Graph<f64>) -> retinex_gan::autograd::Var,
               seed: u64| gradcheck(&p, sets, |n, g| loss(n, g), GRAD_SAMPLES, GRAD_STEP, seed);

    let mut out = Vec::new();
    out.push((
        "decomp_loss",
        run(
            |p| vec![p.decomp.params_mut()],
            &|p, g| {
                let sl = g.constant(p.s_low.clone());
                let sh = g.constant(p.s_high.clone());
                let low = p.decomp.forward(g, sl, true).unwrap();
                let high = p.decomp.forward(g, sh, true).unwrap();
                decomp_loss_graph(g, low, high, sl, sh, &DecompLossWeights::default())
                    .unwrap()
                    .total
            },
            1,
        ),
    ));
    out.push((
        "bce",
        run(
            |p| vec![&mut p.pred],
            &|p, g| {
                let x = g.param("pred", p.pred.get("pred").unwrap(), true);
                bce_const(g, x, 0.3).unwrap()
            },
            2,
        ),
    ));
    out.push((
        "cycle_S",
        run(generators, &|p, g| {
            let v = p.cycle(g);
            cycle_loss_s_graph(g, &v).unwrap()
        }, 3),
    ));
    out.push((
        "cycle_R",
        run(generators, &|p, g| {
            let v = p.cycle(g);
            cycle_loss_r_graph(g, &v).unwrap()
        }, 4),
    ));
    out.push((
        "L_G",
        run(generators, &|p, g| {
            let v = p.cycle(g);
            generator_losses_graph(g, &v, &p.d_high, &p.d_low, &w).unwrap().gen_g
        }, 5),
    ));
    out.push((
        "L_F",
        run(generators, &|p, g| {
            let v = p.cycle(g);
            generator_losses_graph(g, &v, &p.d_high, &p.d_low, &w).unwrap().gen_f
        }, 6),
    ));
    out.push((
        "L_D_high + L_D_low",
        run(discriminators, &|p, g| {
            let v = p.cycle(g);
            let real_h = g.constant(p.s_high.clone());
            let real_l = g.constant(p.s_low.clone());
            let a = discriminator_loss_graph(g, &p.d_high, v.s_high_p, real_h, true).unwrap();
            let b = discriminator_loss_graph(g, &p.d_low, v.s_low_p, real_l, true).unwrap();
            g.add(a, b).unwrap()
        }, 7),
    ));
    out
}
