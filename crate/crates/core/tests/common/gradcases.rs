use super::seeded;
use styleres::attrnet::{AttrNet, AttrNetConfig};
use styleres::losses::*;
use tch::{Kind, Tensor};

pub type Loss = Box<dyn Fn(&Tensor) -> Tensor>;

fn attr_net(kind: Kind) -> AttrNet {
    let cfg = AttrNetConfig {
        widths: [8, 8, 16, 16],
        embed_dim: 8,
    };
    let mut net = AttrNet::new(&cfg, 32, 5).unwrap();
    net.freeze();
    if kind == Kind::Double {
        net.var_store_mut().double();
    }
    net
}

/// (name, loss as a function of one input, input point).
pub fn cases(kind: Kind) -> Vec<(&'static str, Loss, Tensor)> {
    let img = |seed| seeded(&[2, 3, 32, 32], kind, seed);
    let target = img(1);
    let attr = std::rc::Rc::new(attr_net(kind));
    let mut out: Vec<(&'static str, Loss, Tensor)> = Vec::new();

    let (t, t2) = (target.shallow_clone(), img(2));
    out.push((
        "rec_l2",
        Box::new(move |x| rec_l2(&[x, &(x * 0.5 + &t2 * 0.5)], &t).unwrap()),
        img(3),
    ));
    let (t, a) = (target.shallow_clone(), attr.clone());
    out.push((
        "rec_perceptual",
        Box::new(move |x| rec_perceptual(&[x], &t, &a, &PERCEPTUAL_LAYERS).unwrap()),
        img(4),
    ));
    let (t, a) = (target.shallow_clone(), attr.clone());
    out.push(("rec_identity", Box::new(move |x| rec_identity(&[x], &t, &a).unwrap()), img(5)));

    // Row 0 holds the real logits, rows 1.. the fakes.
    let split = |x: &Tensor| (x.get(0), x.get(1), x.get(2));
    out.push((
        "adv_loss (D)",
        Box::new(move |x| {
            let (r, f1, f2) = split(x);
            adv_loss(&r, &[&f1, &f2]).unwrap().0
        }),
        seeded(&[3, 4], kind, 6) * 3,
    ));
    out.push((
        "adv_loss (E)",
        Box::new(move |x| {
            let (r, f1, f2) = split(x);
            adv_loss(&r, &[&f1, &f2]).unwrap().1
        }),
        seeded(&[3, 4], kind, 7) * 3,
    ));
    out.push((
        "feat_reg",
        Box::new(|x| feat_reg(&[x, &(x.narrow(1, 0, 2) * 2.0)], NormConvention::PerElementMean)),
        seeded(&[2, 4, 8, 8], kind, 8),
    ));
    out.push((
        "feat_reg (plain)",
        Box::new(|x| feat_reg(&[x], NormConvention::Plain)),
        seeded(&[2, 4, 8, 8], kind, 9),
    ));

    let (t, a) = (target.shallow_clone(), attr);
    let real_logits = seeded(&[2], kind, 10);
    out.push((
        "full_objective",
        Box::new(move |x| {
            let logits = x.mean_dim(&[1i64, 2, 3][..], false, kind) * 4.0;
            let terms = LossTerms {
                adv: Some(adv_loss(&real_logits, &[&logits]).unwrap().1),
                rec_l2: Some(rec_l2(&[x], &t).unwrap()),
                rec_p: Some(rec_perceptual(&[x], &t, &a, &PERCEPTUAL_LAYERS).unwrap()),
                rec_id: Some(rec_identity(&[x], &t, &a).unwrap()),
                feat: Some(feat_reg(&[&x.narrow(1, 0, 1)], NormConvention::PerElementMean)),
            };
            full_objective(&terms, &LossWeights::no_edit()).unwrap().0
        }),
        img(11),
    ));
    out
}
