//! Fixed word material for the synthetic world: event names and caption
//! templates for each domain.

pub(crate) const EVENT_NAMES: &[&str] = &[
    "dog_bark",
    "rain",
    "siren",
    "cat_meow",
    "thunder",
    "car_horn",
    "bird_song",
    "wind",
    "footsteps",
    "door_slam",
    "baby_cry",
    "crowd_cheer",
    "church_bell",
    "clock_tick",
    "water_drip",
    "engine_idle",
    "train_whistle",
    "glass_break",
    "keyboard_typing",
    "phone_ring",
    "applause",
    "laughter",
    "speech",
    "music",
    "guitar",
    "piano",
    "drum_roll",
    "helicopter",
    "airplane",
    "chainsaw",
    "hammer",
    "vacuum_cleaner",
    "fire_crackle",
    "ocean_wave",
    "frog_croak",
    "rooster_crow",
    "cow_moo",
    "sheep_bleat",
    "horse_gallop",
    "insect_buzz",
    "whistle",
    "cough",
    "sneeze",
    "snore",
    "gunshot",
    "explosion",
    "fireworks",
    "alarm_clock",
    "violin",
    "motorcycle",
    "stream_flow",
    "owl_hoot",
    "typewriter",
    "bicycle_bell",
    "zipper",
    "microwave_beep",
    "lawn_mower",
    "wolf_howl",
    "duck_quack",
    "pig_oink",
    "cricket_chirp",
    "flute",
    "trumpet",
    "saxophone",
];

/// Words of the hard-prompt template, always part of the vocabulary.
pub(crate) const HARD_PROMPT_WORDS: &[&str] = &["there", "are", "in", "the", "audio"];

pub(crate) const SOURCE_TEMPLATES: &[&str] = &[
    "a {0} is heard",
    "the sound of {0}",
    "{0} and then {1}",
    "{0} followed by {1}",
    "{0} then {1} then {2}",
    "a mix of {0} and {1} and {2}",
];

pub(crate) const TARGET_TEMPLATES: &[&str] = &[
    "you can hear {0}",
    "{0} occurs nearby",
    "{0} with {1} in the background",
    "{0} as well as {1}",
    "{0} with {1} and {2} nearby",
    "someone records {0} {1} and {2}",
];
