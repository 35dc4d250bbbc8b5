use sctd_core::config::RunConfig;
use sctd_core::losses::LossKind;

const DEFAULT_TOML: &str = include_str!("../../../configs/default.toml");

#[test]
fn shipped_default_config_matches_built_in_defaults() {
    assert_eq!(RunConfig::from_toml_str(DEFAULT_TOML).unwrap(), RunConfig::default());
}

#[test]
fn serialized_defaults_round_trip() {
    let text = RunConfig::default().to_toml_string();
    assert_eq!(RunConfig::from_toml_str(&text).unwrap(), RunConfig::default());
}

#[test]
fn overrides_apply_on_top_of_a_document() {
    let base: toml::Value = toml::from_str(DEFAULT_TOML).unwrap();
    let cfg = RunConfig::with_overrides(
        base,
        &[
            "loss.kind=\"cds\"".into(),
            "scene.n_views=3".into(),
            "condition=b".into(),
        ],
    )
    .unwrap();
    assert_eq!(cfg.loss.kind, LossKind::Cds);
    assert_eq!(cfg.scene.n_views, 3);
    assert_eq!(cfg.condition, "b");
}

#[test]
fn errors_name_the_offending_key() {
    let cases = [
        ("[scene]\npoints = \"x\"\n", "scene.points"),
        ("[loss]\nkind = \"nope\"\n", "loss.kind"),
        ("[segmentation]\ncount = 0\n", "segmentation"),
        (
            "[[prior.components]]\nmean = [0.0]\nscale = 1.0\nweight = 1.0\nextra = 1\n",
            "prior.components",
        ),
    ];
    for (doc, path) in cases {
        let err = RunConfig::from_toml_str(doc).unwrap_err().to_string();
        assert!(err.contains(path), "{doc:?}: {err}");
    }
}
