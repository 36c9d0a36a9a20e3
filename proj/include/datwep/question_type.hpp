#pragma once

#include <array>
#include <string>
#include <string_view>

#include "datwep/errors.hpp"

namespace datwep {

enum class QuestionType { SimpleCounting = 0, ComplexCounting = 1, YesNo = 2, ConditionRecognition = 3 };

inline constexpr std::size_t kQuestionTypeCount = 4;

inline constexpr std::array<QuestionType, kQuestionTypeCount> kAllQuestionTypes = {
    QuestionType::SimpleCounting, QuestionType::ComplexCounting, QuestionType::YesNo,
    QuestionType::ConditionRecognition};

/// Tag as written to qa.jsonl.
inline std::string_view question_type_tag(QuestionType t) {
  switch (t) {
    case QuestionType::SimpleCounting: return "Simple_Counting";
    case QuestionType::ComplexCounting: return "Complex_Counting";
    case QuestionType::YesNo: return "Yes_No";
    case QuestionType::ConditionRecognition: return "Condition_Recognition";
  }
  throw ValidationError("unknown question type");
}

/// Human-readable name used in reports.
inline std::string_view question_type_label(QuestionType t) {
  switch (t) {
    case QuestionType::SimpleCounting: return "Simple Counting";
    case QuestionType::ComplexCounting: return "Complex Counting";
    case QuestionType::YesNo: return "Yes/No";
    case QuestionType::ConditionRecognition: return "Condition Recognition";
  }
  throw ValidationError("unknown question type");
}

/// Accepts either the file tag ("Yes_No") or the label ("Yes/No").
inline QuestionType parse_question_type(std::string_view s) {
  for (QuestionType t : kAllQuestionTypes) {
    if (s == question_type_tag(t) || s == question_type_label(t)) return t;
  }
  throw ValidationError("unknown question type tag '" + std::string(s) + "'");
}

inline std::size_t question_type_index(QuestionType t) {
  const auto i = static_cast<std::size_t>(t);
  if (i >= kQuestionTypeCount) throw ValidationError("unknown question type");
  return i;
}

}  // namespace datwep
