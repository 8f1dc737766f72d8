mod common;

use common::{g1_memory, g2_memory, G1_INPUT, G2_INPUT};
use hyperstate_core::model::StateId;
use hyperstate_core::prompter::{parse_reply, render_prompt, render_reply, PromptConfig};

const FOUR: [StateId; 4] = [StateId::Final, StateId::Specialized, StateId::Oneshot, StateId::Stepwise];

#[test]
fn vqa_example_renders_byte_for_byte() {
    let p = render_prompt(&g1_memory(), StateId::Stepwise, 2, &FOUR, &PromptConfig::default());
    assert_eq!(p.text, G1_INPUT);
}

#[test]
fn grounding_example_renders_byte_for_byte() {
    let p = render_prompt(&g2_memory(), StateId::Stepwise, 2, &FOUR, &PromptConfig::default());
    assert_eq!(p.text, G2_INPUT);
}

const G_OUTPUT: &str = include_str!("fixtures/g_output.txt");

#[test]
fn example_output_round_trips() {
    for memory in [g1_memory(), g2_memory()] {
        let p = render_prompt(&memory, StateId::Stepwise, 2, &FOUR, &PromptConfig::default());
        assert_eq!(parse_reply(G_OUTPUT, &p).unwrap(), StateId::Stepwise);
        assert_eq!(render_reply(StateId::Stepwise), G_OUTPUT);
    }
}
