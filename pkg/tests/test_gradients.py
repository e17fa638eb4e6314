"""Float64 finite-difference checks for every differentiable path that
the training signal flows through (smooth activations throughout)."""
import torch

from objcentric.encoder import extract_features
from objcentric.geometry import CameraBatch, pixel_grid, ray_dirs
from objcentric.model import build_model, lift_depth

from conftest import simple_camera, small_config
from gradcheck_util import max_rel_error

TOL = 1e-4


def smooth_model(mode="plane"):
    cfg = small_config(decoder={"activation": "softplus", "density_act": "softplus"}, lift={"mode": mode},
                       sampling={"n_coarse": 24, "jitter": False})
    return build_model(cfg, torch.float64), cfg


def setup(mode="plane"):
    model, cfg = smooth_model(mode)
    cam = CameraBatch.from_poses([simple_camera()], torch.float64)
    g = torch.Generator().manual_seed(0)
    img = torch.rand(1, 16, 16, 3, generator=g, dtype=torch.float64)
    with torch.no_grad():
        lat = model.infer(img, cam)
    lat = lat.with_(valid=torch.ones_like(lat.valid))
    pix = pixel_grid(16, 16, torch.float64)[torch.tensor([0, 37, 90, 136, 200, 255])]
    return model, cfg, cam, lat, pix


def pixel_readout(model, cfg, cam, lat, pix):
    probe = torch.linspace(0.3, 1.7, pix.shape[0] * 3, dtype=torch.float64).reshape(-1, 3)
    r_in = cam.R[0].T
    out = model.render_pixels(lat, r_in, cam, pix, cfg.sampling, locality=False)
    return (out.render.rgb * probe).sum()


def test_pixel_color_wrt_latents_and_positions():
    model, cfg, cam, lat, pix = setup()
    for name in ("z_bg", "z_fg", "p_wd"):
        leaf = getattr(lat, name).clone().requires_grad_(True)
        fn = lambda: pixel_readout(model, cfg, cam, lat.with_(**{name: leaf}), pix)
        assert max_rel_error(fn, leaf, n_probe=10) <= TOL, name


def test_pixel_color_wrt_decoder_weights():
    model, cfg, cam, lat, pix = setup()
    for pname in ("fg_field.in_pos.weight", "fg_field.out.bias", "bg_field.body.1.weight", "bg_field.in_z.weight"):
        p = dict(model.named_parameters())[pname]
        fn = lambda: pixel_readout(model, cfg, cam, lat, pix)
        assert max_rel_error(fn, p, n_probe=8) <= TOL, pname


def test_decoder_output_gradients():
    model, _, _, _, _ = setup()
    g = torch.Generator().manual_seed(1)
    x = torch.randn(2, 30, 3, generator=g, dtype=torch.float64)
    z = torch.randn(2, model.cfg.latent_dim * 2, generator=g, dtype=torch.float64, requires_grad=True)

    def fn():
        out = model.fg_field(x, z)
        return out.sigma.sum() + (out.color * 0.7).sum()

    assert max_rel_error(fn, z) <= TOL
    assert max_rel_error(fn, model.fg_field.body[1].weight) <= TOL


def test_lift_depth_wrt_scale_head():
    model, cfg, cam, lat, _ = setup("depth")
    probe = torch.tensor([0.4, -1.1, 0.9], dtype=torch.float64)
    fn = lambda: (lift_depth(cam, lat.p_img, lat.z_fg, model.scale_head, cfg.generator.scene_center) * probe).sum()
    assert max_rel_error(fn, model.scale_head.linear.weight) <= TOL
    assert max_rel_error(fn, model.scale_head.linear.bias, n_probe=1) <= TOL


def test_encoder_wrt_input_pixel():
    model, _, _, _, _ = setup()
    g = torch.Generator().manual_seed(2)
    img = torch.rand(1, 16, 16, 3, generator=g, dtype=torch.float64, requires_grad=True)
    w = torch.randn(16, model.cfg.latent_dim, generator=g, dtype=torch.float64)
    fn = lambda: (extract_features(img, model.encoder).features[0] * w).sum()
    assert max_rel_error(fn, img, n_probe=10) <= TOL
