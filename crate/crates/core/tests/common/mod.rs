#![allow(dead_code)]

use hyperstate_core::model::{MemoryDraft, MetricKind, SharedMemory, Snapshot, StateId, TaskSpec};

pub const G1_INPUT: &str = include_str!("../fixtures/g1_vqa_input.txt");
pub const G2_INPUT: &str = include_str!("../fixtures/g2_grounding_input.txt");

pub fn vqa_task(query: &str) -> TaskSpec {
    TaskSpec {
        title: "Compositional image question answering".into(),
        description: "This type of question is intended to return a textual answer to the given question. \nPlease use \"final_answer\" as the variable name when providing Python code. Make sure \"final_answer\" is string type.\nE.g., For the question \"What sport can you use this for?\", please provide the name of the sport as your answer in the final step.\nE.g., For the question \"Is it good weather?\", the final answer must be either \"yes\" or \"no\".".into(),
        query: query.into(),
        image_ref: "gqa/n161313.jpg".into(),
        metric_kind: MetricKind::VqaAccuracy,
    }
}

pub fn grounding_task(query: &str) -> TaskSpec {
    TaskSpec {
        title: "Referring Expression Comprehension".into(),
        description: "This type of task is to return one image patch in the image that corresponds best to the given query. \nThe object described by the query must exist in the image, and only have one patch. You need to first detect that kind of object in the image and then identify which one matches the description in the query. \nPlease use \"final_answer\" as the target image patch name when providing Python code. Make sure only one ImagePatch in \"final_answer\".\nE.g., query is \"left woman with shoes,\" return one of the detected woman patches in the final step, don't return shoes patch.\nE.g., query is \"muffins on the table,\" return one of the muffin patches in the final step, don't return table patch.\nE.g., query is \"white chaise under window\", return one of the chaise patches in the final step, don't return window patch.".into(),
        query: query.into(),
        image_ref: "refcoco/COCO_train2014_000000580957.jpg".into(),
        metric_kind: MetricKind::GroundingIou,
    }
}

/// Memory at the start of an episode: task description, query, Initial.
pub fn fresh(task: TaskSpec) -> SharedMemory {
    let mut m = SharedMemory::new(task.clone());
    m.append(
        0,
        [
            MemoryDraft::task_description(format!("{}\n{}", task.title, task.description)),
            MemoryDraft::query(task.query.clone()),
            MemoryDraft::transition(StateId::Initial),
        ],
    )
    .unwrap();
    m
}

/// Memory behind the VQA dataset example: two Stepwise steps after Initial.
pub fn g1_memory() -> Snapshot {
    let s = StateId::Stepwise;
    let mut m = fresh(vqa_task("Is the tall clock small or large?"));
    m.append(
        1,
        [
            MemoryDraft::transition(s),
            MemoryDraft::code(s, "image_patch = ImagePatch(image)\n# Find clock in the image\nclock_patches = image_patch.find([\"clock\"])[\"clock\"]"),
            MemoryDraft::variable(s, "image_patch", "ImagePatch(0, 0, 500, 333), patch name: original_image"),
            MemoryDraft::variable(s, "clock_patches", "[ImagePatch(234, 131, 285, 182)]"),
            MemoryDraft::feedback(s, "Detection result: Only one clock has been detected in original_image."),
        ],
    )
    .unwrap();
    m.append(
        2,
        [
            MemoryDraft::transition(s),
            MemoryDraft::code(s, "# Only one clock has been detected\nclock_patch = clock_patches[0]"),
            MemoryDraft::variable(s, "clock_patch", "ImagePatch(234, 131, 285, 182), patch name: clock_1_in_original_image"),
        ],
    )
    .unwrap();
    m.snapshot()
}

/// Memory behind the grounding dataset example: Oneshot, then Stepwise.
pub fn g2_memory() -> Snapshot {
    let mut m = fresh(grounding_task("far right"));
    m.append(1, [MemoryDraft::transition(StateId::Oneshot)]).unwrap();
    let s = StateId::Stepwise;
    m.append(
        2,
        [
            MemoryDraft::transition(s),
            MemoryDraft::code(s, "image_patch = ImagePatch(image)\n# Find people in the image\npeople_patches = image_patch.find([\"people\"])"),
            MemoryDraft::variable(s, "image_patch", "ImagePatch(0, 0, 640, 427), patch name: original_image"),
            MemoryDraft::variable(s, "people_patches", "{\"people\": [ImagePatch(374, 0, 584, 377), ImagePatch(0, 7, 153, 353), ImagePatch(200, 47, 361, 408), ImagePatch(517, 0, 640, 382), ImagePatch(113, 174, 195, 353)]}"),
            MemoryDraft::feedback(s, "Detection result: 5 people have been detected in original_image."),
        ],
    )
    .unwrap();
    m.snapshot()
}
