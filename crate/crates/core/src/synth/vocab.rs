//! Word lists used by the generator.

pub const NAMES: &[&str] = &[
    "joan", "pere", "maria", "anna", "josep", "miquel", "francesc", "antoni", "caterina",
    "elisabet", "jaume", "marti", "pau", "joana", "eulalia", "tomas", "gabriel", "bernat",
    "isabel", "agnes", "climent", "esteve", "llucia", "rafael", "jeronima", "salvador", "paula",
    "teresa", "jordi", "narcis",
];

pub const SURNAMES: &[&str] = &[
    "puig", "ferrer", "soler", "vila", "roca", "serra", "pujol", "riera", "font", "costa", "mas",
    "sala", "prat", "coll", "camps", "vidal", "oliver", "torres", "bosch", "valls", "rovira",
    "batlle", "comas", "esteva", "pons", "garriga",
];

pub const OCCUPATIONS: &[&str] = &[
    "pages", "sastre", "fuster", "teixidor", "paraire", "mariner", "corder", "moliner", "sabater",
    "forner", "boter", "mercader", "pescador", "hortola", "traginer", "barber", "cirurgia",
    "notari",
];

pub const LOCATIONS: &[&str] = &[
    "barcelona",
    "girona",
    "vic",
    "mataro",
    "sabadell",
    "terrassa",
    "reus",
    "manresa",
    "badalona",
    "sitges",
    "olot",
    "lleida",
    "tarragona",
    "igualada",
    "sants",
    "gracia",
    "sarria",
    "tortosa",
    "berga",
    "solsona",
];

pub const MONTHS: &[&str] = &[
    "gener", "febrer", "mars", "abril", "maig", "juny", "juliol", "agost", "setembre", "octubre",
    "novembre", "desembre",
];

/// Words that take any entity tag, depending on where or after what they appear.
pub const SHARED: &[&str] = &[
    "jordan", "paris", "may", "august", "florence", "chase", "victoria", "sydney", "austin",
    "chelsea", "lincoln", "georgia", "carolina", "mercer", "baker", "turner", "mason", "fisher",
    "porter", "hunter", "sterling", "madison", "orlando", "troy", "avalon", "summer", "june",
    "april", "winter", "easter", "harvest", "dallas", "aurora", "salem", "camden", "sofia",
    "tyler", "dale", "cooper", "fletcher", "weaver", "miller", "cliff", "brooke", "rose", "lily",
    "hope", "grace",
];

pub const FILLERS: &[&str] = &[
    "the",
    "and",
    "was",
    "for",
    "with",
    "from",
    "that",
    "his",
    "her",
    "they",
    "were",
    "had",
    "after",
    "before",
    "said",
    "will",
    "would",
    "city",
    "year",
    "new",
    "people",
    "country",
    "police",
    "report",
    "today",
    "week",
    "also",
    "which",
    "there",
    "about",
    "over",
    "into",
    "more",
    "their",
    "been",
    "against",
    "during",
    "three",
    "first",
    "last",
    "some",
    "most",
    "while",
    "under",
    "group",
    "talks",
    "leaders",
    "forces",
    "state",
    "north",
    "south",
    "officials",
];

/// Prose triggers and the tag they impose on the following word.
pub const TRIGGERS: &[(&str, &str)] = &[
    ("mr", "name"),
    ("in", "location"),
    ("on", "date"),
    ("as", "occupation"),
];

/// Printed field keys of the forms regime.
pub const FORM_KEYS: &[(&str, &str)] = &[
    ("name", "name"),
    ("place", "location"),
    ("date", "date"),
    ("job", "occupation"),
];

/// Row template of a form, top to bottom, repeated if the page has more
/// rows. `None` rows carry no key and free text tagged `other`.
pub const FORM_TEMPLATE: &[Option<&str>] = &[
    Some("date"),
    Some("name"),
    Some("name"),
    Some("place"),
    Some("job"),
    None,
    None,
];
