//! Fixed clinical lexicons. They drive the note generator, the public text used
//! for vocabulary building and base-model pretraining, and the annotator's
//! gazetteer, so every generated mention is recoverable by the extractor.

use super::EntityCategory;

pub const MEDICATIONS: &[&str] = &[
    "aspirin",
    "metoprolol",
    "lisinopril",
    "atorvastatin",
    "metformin",
    "heparin",
    "furosemide",
    "warfarin",
    "amoxicillin",
    "ceftriaxone",
    "vancomycin",
    "pantoprazole",
    "omeprazole",
    "amlodipine",
    "losartan",
    "hydrochlorothiazide",
    "simvastatin",
    "clopidogrel",
    "apixaban",
    "insulin glargine",
    "levothyroxine",
    "prednisone",
    "albuterol",
    "gabapentin",
    "acetaminophen",
    "ibuprofen",
    "morphine",
    "oxycodone",
    "ondansetron",
    "lorazepam",
    "sertraline",
    "citalopram",
    "tamsulosin",
    "allopurinol",
    "digoxin",
    "diltiazem",
    "carvedilol",
    "spironolactone",
    "enoxaparin",
    "azithromycin",
];

pub const DOSE_AMOUNTS: &[&str] = &[
    "5", "10", "12.5", "20", "25", "40", "50", "81", "100", "250", "325", "500", "1000",
];

pub const DOSE_UNITS: &[&str] = &["mg", "mcg", "units", "mL", "g"];

pub const FREQUENCIES: &[&str] = &[
    "once daily",
    "twice daily",
    "three times daily",
    "every 6 hours",
    "every 8 hours",
    "every 12 hours",
    "at bedtime",
    "as needed",
    "every morning",
    "weekly",
];

pub const SYMPTOMS: &[&str] = &[
    "chest pain",
    "shortness of breath",
    "cough",
    "fever",
    "scarring",
    "edema",
    "nausea",
    "vomiting",
    "fatigue",
    "dyspnea",
    "pleural effusion",
    "atelectasis",
    "opacity",
    "pneumothorax",
    "cardiomegaly",
    "consolidation",
    "headache",
    "dizziness",
    "abdominal pain",
    "back pain",
    "palpitations",
    "syncope",
    "wheezing",
    "hemoptysis",
    "weight loss",
    "chills",
    "diarrhea",
    "constipation",
    "rash",
    "confusion",
    "weakness",
    "anemia",
    "hypotension",
    "tachycardia",
    "infiltrate",
];

pub const EXAMINATIONS: &[&str] = &[
    "CT chest",
    "chest x-ray",
    "echocardiogram",
    "MRI brain",
    "ECG",
    "abdominal ultrasound",
    "portable chest radiograph",
    "CT abdomen",
    "stress test",
    "blood culture",
    "urinalysis",
    "lipid panel",
    "complete blood count",
    "bronchoscopy",
    "colonoscopy",
];

pub const BODY_STRUCTURES: &[&str] = &[
    "left lung",
    "right lung",
    "right lower lobe",
    "left lower lobe",
    "right upper lobe",
    "left upper lobe",
    "heart",
    "abdomen",
    "left ventricle",
    "chest wall",
    "chest",
    "lung bases",
    "mediastinum",
    "liver",
    "kidney",
    "spine",
    "pleura",
];

pub const SEXES: &[&str] = &["male", "female", "man", "woman"];

/// Lower-cased trigger phrases that negate entities later in the same sentence.
pub const NEGATION_TRIGGERS: &[&str] = &["no", "denies", "without", "negative for", "not"];

/// Lower-cased trigger phrases that mark later entities as past.
pub const PAST_TRIGGERS: &[&str] = &["history of", "prior", "previous"];

/// Generic clinical and function words, published with the lexicon so the
/// tokenizer never needs to look at private notes.
pub const COMMON_WORDS: &[&str] = &[
    "EXAMINATION", "INDICATION", "FINDINGS", "IMPRESSION", "COMPARISON", "HISTORY", "PLAN",
    "Patient", "patient", "reports", "denies", "Denies", "admitted", "with", "History", "history",
    "of", "Discharged", "discharged", "on", "Continue", "continue", "Started", "started", "for",
    "showed", "shows", "Follow", "up", "in", "two", "weeks", "There", "is", "the", "The", "No",
    "no", "seen", "Mild", "mild", "at", "unremarkable", "Compared", "prior", "change", "evidence",
    "Tolerating", "tolerating", "Exam", "notable", "over", "and", "stable", "today", "Plan",
    "year", "old", "a", "A", "may", "be", "used", "to", "treat", "commonly", "given", "as", "can",
    "detect", "often", "involves", "Patients", "report", "present", "typical", "dose", "is",
    "clinical", "note", "about", "being", "prescribed", "given", "frequency", "Generate",
    "ENTITIES", "CLINICAL", "NOTE", "OF", "TYPE", "CXR", "DISCHARGE", "PROGRESS", "PUBLIC",
    "TEXT", "Medication", "name", "Dosage", "Frequency", "Symptom", "or", "sign", "Examination",
    "Body", "structure", "Age", "new", "persistent", "improved", "worsening", "recommend",
    "without", "acute", "small", "Small", "large", "Worsening", "left", "right", "bilateral", "noted", "findings",
];

pub fn phrases(category: EntityCategory) -> &'static [&'static str] {
    match category {
        EntityCategory::MedicationName => MEDICATIONS,
        EntityCategory::Frequency => FREQUENCIES,
        EntityCategory::SymptomOrSign => SYMPTOMS,
        EntityCategory::ExaminationName => EXAMINATIONS,
        EntityCategory::BodyStructure => BODY_STRUCTURES,
        EntityCategory::Dosage | EntityCategory::Age => &[],
    }
}
